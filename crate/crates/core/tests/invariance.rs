use std::collections::BTreeSet;

use bundlenat::compat_graph::{frequency_from_bundles, normalize_cooccurrence};
use bundlenat::data::GenerationInstance;
use bundlenat::decoder::{infer_bundle, PredictionDistribution};
use bundlenat::eval::{precision_at_k, precision_plus_at_k, recall_at_k, PrecisionMode};
use bundlenat::model::{BundleNat, ModelConfig};
use bundlenat::numerics::{softmax_rows, Tensor};
use bundlenat::pretrain::PreferenceEmbeddings;
use bundlenat::training::{bundle_bce_loss, hungarian_match, oaxe_slot_loss};
use proptest::prelude::*;

const N_ITEMS: usize = 24;

fn instance() -> impl Strategy<Value = GenerationInstance> {
    (Just((0..N_ITEMS).collect::<Vec<_>>()).prop_shuffle(), 6usize..=16, 1usize..=4, 0usize..3).prop_map(
        |(items, m, k, user)| GenerationInstance {
            user,
            candidates: items[..m].to_vec(),
            bundle: items[..k].to_vec(),
        },
    )
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, N_ITEMS)
}

fn shuffled(inst: &GenerationInstance, order: &[usize]) -> GenerationInstance {
    let mut c = inst.candidates.clone();
    let m = c.len();
    for (i, &o) in order.iter().enumerate().take(m) {
        c.swap(i, o % m);
    }
    GenerationInstance { candidates: c, ..inst.clone() }
}

fn small_model(seed: u64) -> BundleNat {
    let cfg = ModelConfig { heads: 2, enc_depth: 1, dec_depth: 1, gnn_layers: 1, ..ModelConfig::with_dim(4) };
    let table = |r: usize, off: f64| {
        Tensor::matrix(r, 4, (0..r * 4).map(|i| ((i as f64 + off) * 0.7).sin()).collect()).unwrap()
    };
    let prefs = PreferenceEmbeddings { user_table: table(3, 0.3), item_table: table(N_ITEMS, 1.1) };
    let bundles: Vec<Vec<usize>> = (0..N_ITEMS).step_by(3).map(|i| vec![i, (i + 1) % N_ITEMS, (i + 5) % N_ITEMS]).collect();
    let graph = normalize_cooccurrence(&frequency_from_bundles(&bundles, N_ITEMS).unwrap()).unwrap();
    BundleNat::init(cfg, prefs, graph, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn infer_ignores_candidate_order(inst in instance(), z in logits(), order in prop::collection::vec(0usize..64, 16), k in 1usize..=6) {
        let k = k.min(inst.candidates.len());
        let a = infer_bundle(&PredictionDistribution::from_logits(z.clone(), &inst.candidates).unwrap(), k).unwrap();
        let p = shuffled(&inst, &order);
        let b = infer_bundle(&PredictionDistribution::from_logits(z, &p.candidates).unwrap(), k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn model_prediction_ignores_candidate_order(inst in instance(), order in prop::collection::vec(0usize..64, 16), seed in 0u64..4) {
        let model = small_model(seed);
        let k = inst.bundle.len();
        let a: BTreeSet<usize> = model.predict(&inst, k).unwrap().into_iter().collect();
        let b: BTreeSet<usize> = model.predict(&shuffled(&inst, &order), k).unwrap().into_iter().collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bce_ignores_candidate_order(inst in instance(), z in logits(), order in prop::collection::vec(0usize..64, 16)) {
        let p = shuffled(&inst, &order);
        let a = bundle_bce_loss(&PredictionDistribution::from_logits(z.clone(), &inst.candidates).unwrap(), &inst).unwrap();
        let b = bundle_bce_loss(&PredictionDistribution::from_logits(z, &p.candidates).unwrap(), &p).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn oaxe_ignores_target_order(raw in prop::collection::vec(-3.0f64..3.0, 4 * 9), targets in Just((0..9usize).collect::<Vec<_>>()).prop_shuffle()) {
        let dists = softmax_rows(&Tensor::matrix(4, 9, raw).unwrap()).unwrap();
        let t = &targets[..4];
        let base = oaxe_slot_loss(&dists, t).unwrap();
        for r in 1..4 {
            let mut rot = t.to_vec();
            rot.rotate_left(r);
            prop_assert_eq!(oaxe_slot_loss(&dists, &rot).unwrap(), base);
        }
        let mut rev = t.to_vec();
        rev.reverse();
        prop_assert_eq!(oaxe_slot_loss(&dists, &rev).unwrap(), base);
    }

    #[test]
    fn hungarian_assignment_is_a_bijection(raw in prop::collection::vec(0.0f64..10.0, 25)) {
        let cost: Vec<Vec<f64>> = raw.chunks(5).map(<[f64]>::to_vec).collect();
        let a = hungarian_match(&cost).unwrap();
        let seen: BTreeSet<usize> = a.slot_to_item.iter().copied().collect();
        prop_assert_eq!(seen.len(), 5);
        let total: f64 = a.slot_to_item.iter().enumerate().map(|(s, &t)| cost[s][t]).sum();
        prop_assert_eq!(total, a.cost);
    }

    #[test]
    fn precision_plus_dominates(pairs in prop::collection::vec((Just((0..20usize).collect::<Vec<_>>()).prop_shuffle(), Just((0..20usize).collect::<Vec<_>>()).prop_shuffle()), 1..30)) {
        let k = 5;
        let pred: Vec<Vec<usize>> = pairs.iter().map(|(p, _)| p[..k].to_vec()).collect();
        let truth: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t[..k].to_vec()).collect();
        let plus = precision_plus_at_k(&pred, &truth).unwrap();
        for mode in [PrecisionMode::FirstMatch, PrecisionMode::Member] {
            prop_assert!(plus >= precision_at_k(&pred, &truth, mode).unwrap());
        }
        prop_assert!(plus >= recall_at_k(&pred, &truth, k).unwrap());
    }
}
