//! Invariants checked over generated inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protosearch::alignment::balance_factor;
use protosearch::attention::{aggregate_branches_on, apply_attention, AttentionParams, FeatureMap};
use protosearch::autograd::{Tape, Tensor};
use protosearch::config::RunConfig;
use protosearch::eval::{search_metrics, Detection, GalleryImage, Query};
use protosearch::labeler::{assign_pseudo_labels, bcubed_f1, BankKind, DistanceCounter, PrototypeBank};
use protosearch::memory::{
    cluster_contrastive_loss, init_cluster_memory, momentum_update_memory, reliable_neighbor_masks, InstanceMemory,
    NeighborWeight,
};
use protosearch::scene::BBox;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Vectors of length `d` kept away from the origin so they normalize cleanly.
fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), n)
        .prop_filter("non-degenerate", |vs| vs.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3))
}

fn map_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, u64)> {
    (1usize..16, 1usize..16, 1usize..16).prop_flat_map(|(h, w, c)| {
        (Just(h), Just(w), Just(c), prop::collection::vec(-1.0..1.0f64, h * w * c), any::<u64>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_keeps_shape_and_shrinks_entries((h, w, c, data, seed) in map_strategy()) {
        let x = FeatureMap::new(h, w, c, Tensor::new(h * w, c, data)).unwrap();
        let params = AttentionParams::init(h, w, c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = apply_attention(&x, &params).unwrap();
        prop_assert_eq!((out.height(), out.width(), out.channels()), (h, w, c));
        for (o, i) in out.tensor().data().iter().zip(x.tensor().data()) {
            prop_assert!(o.is_finite());
            prop_assert!(o.signum() == i.signum() || *o == 0.0);
            if *i != 0.0 {
                prop_assert!(o.abs() < i.abs(), "{} not shrunk to {}", i, o);
            }
        }
    }

    #[test]
    fn aggregation_statistics_under_translation((h, w, c, data, _) in map_strategy(), shift in -5.0..5.0f64) {
        let stats = |values: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(h * w, c, values));
            let a = aggregate_branches_on(&mut tape, x);
            [a.channel_covariance, a.spatial_covariance, a.channel_means, a.position_means]
                .map(|v| tape.value(v).data().to_vec())
        };
        let base = stats(data.clone());
        let moved = stats(data.iter().map(|v| v + shift).collect());
        for k in 0..2 {
            for (a, b) in base[k].iter().zip(&moved[k]) {
                prop_assert!((a - b).abs() < 1e-9, "covariance moved {} -> {}", a, b);
            }
        }
        for k in 2..4 {
            for (a, b) in base[k].iter().zip(&moved[k]) {
                prop_assert!((b - a - shift).abs() < 1e-9, "mean {} -> {}", a, b);
            }
        }
    }

    #[test]
    fn balance_factor_monotone_and_complementary(ns in 1i64..5000, nt in 1i64..5000, extra in 1i64..500) {
        let a = balance_factor(ns, nt).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(balance_factor(ns, nt + extra).unwrap() >= a);
        prop_assert!((a + balance_factor(nt, ns).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn labeling_commutes_with_permutation_and_scale(
        features in vectors(30, 4),
        protos in vectors(6, 4),
        perm_seed in any::<u64>(),
        scale in 0.1..10.0f64,
    ) {
        let bank = PrototypeBank::new(protos.clone(), (10..16).collect(), BankKind::Random).unwrap();
        let mut counter = DistanceCounter::new();
        let base = assign_pseudo_labels(&features, &bank, &mut counter).unwrap();

        let mut order: Vec<usize> = (0..features.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| features[i].clone()).collect();
        let p = assign_pseudo_labels(&permuted, &bank, &mut counter).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(p.labels[k], base.labels[i]);
        }

        let scaled = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> { vs.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect() };
        let scaled_bank = PrototypeBank::new(scaled(&protos), (10..16).collect(), BankKind::Random).unwrap();
        let s = assign_pseudo_labels(&scaled(&features), &scaled_bank, &mut counter).unwrap();
        prop_assert_eq!(&s.labels, &base.labels);
        prop_assert_eq!(counter.evaluations(), 3 * 30 * 6);
    }

    #[test]
    fn memory_rows_stay_unit_after_updates(
        entries in vectors(5, 6),
        queries in vectors(20, 6),
        momentum in 0.0..0.999f64,
    ) {
        let mut instances = InstanceMemory::new(entries.clone(), 0.5, momentum).unwrap();
        let mut clusters = init_cluster_memory(&entries, &[0, 1, 2, 0, 1], 0.1, momentum).unwrap();
        for (k, q) in queries.into_iter().enumerate() {
            let q = unit(q);
            instances.update(k % 5, &q);
            momentum_update_memory(&mut clusters, &q, (k % 3) as u32).unwrap();
        }
        for v in instances.entries().iter().chain(clusters.centroids()) {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12, "norm {}", n);
        }
    }

    #[test]
    fn neighbor_masks_are_symmetric_and_irreflexive(entries in vectors(12, 3), threshold in 0.0..2.0f64) {
        let memory = InstanceMemory::new(entries, threshold, 0.2).unwrap();
        let masks = reliable_neighbor_masks(&memory, threshold);
        for j in 0..12 {
            prop_assert!(!masks[j][j]);
            for i in 0..12 {
                prop_assert_eq!(masks[j][i], masks[i][j]);
            }
        }
    }

    #[test]
    fn cluster_loss_is_bounded(
        centroids in vectors(8, 5),
        query in prop::collection::vec(-1.0..1.0f64, 5).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-2)),
        k in 1usize..=8,
        pos in 0usize..8,
        tau in 0.05..1.0f64,
    ) {
        let labels: Vec<u32> = (0..k as u32).collect();
        let memory = init_cluster_memory(&centroids[..k], &labels, tau, 0.2).unwrap();
        let loss = cluster_contrastive_loss(&unit(query), &memory, (pos % k) as u32).unwrap();
        prop_assert!(loss >= -1e-12);
        prop_assert!(loss <= (k as f64).ln() + 2.0 / tau + 1e-9, "{} above bound", loss);
    }

    #[test]
    fn distractors_never_raise_map(
        features in vectors(9, 4),
        distractors in vectors(6, 4),
        placement in prop::collection::vec(0usize..3, 6),
    ) {
        let person = |x: f64| BBox::new(x, 0.0, x + 10.0, 30.0);
        // Three gallery images, each showing identities 0, 1, 2 side by side.
        let mut gallery: Vec<GalleryImage> = (0..3)
            .map(|g| GalleryImage {
                gt_boxes: (0..3).map(|k| person(20.0 * k as f64)).collect(),
                gt_ids: vec![0, 1, 2],
                detections: (0..3)
                    .map(|k| Detection { bbox: person(20.0 * k as f64), score: 1.0, feature: unit(features[3 * g + k].clone()) })
                    .collect(),
            })
            .collect();
        let queries: Vec<Query> =
            (0..3).map(|id| Query { identity: id, image: 0, feature: gallery[0].detections[id as usize].feature.clone() }).collect();
        let mut last = search_metrics(&queries, &gallery);
        for (d, &g) in distractors.into_iter().zip(&placement) {
            gallery[g].detections.push(Detection { bbox: BBox::new(100.0, 0.0, 110.0, 30.0), score: 1.0, feature: unit(d) });
            let now = search_metrics(&queries, &gallery);
            prop_assert!(now.map <= last.map + 1e-12, "{} -> {}", last.map, now.map);
            prop_assert!(now.top1 <= last.top1);
            last = now;
        }
    }

    #[test]
    fn config_survives_toml(
        seed in any::<u32>(),
        lr in 1e-4..0.5f64,
        n_random in 1usize..1000,
        tau in 1e-3..5.0f64,
        threshold in 0.0..2.0f64,
        unit_weight in any::<bool>(),
        adapt in 0usize..50,
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = u64::from(seed);
        cfg.optim.lr = lr;
        cfg.labeling.n_random = n_random;
        cfg.memory.tau = tau;
        cfg.memory.neighbor_threshold = threshold;
        cfg.memory.neighbor_weight = if unit_weight { NeighborWeight::Unit } else { NeighborWeight::Normalized };
        cfg.train.adapt_epochs = adapt;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn neighbor_weight_accepts_only_its_two_names(name in "[a-z]{1,12}") {
        let text = format!("version = 1\n[memory]\nneighbor_weight = \"{name}\"\n");
        let parsed = RunConfig::from_toml(&text);
        match name.as_str() {
            "unit" => prop_assert_eq!(parsed.unwrap().memory.neighbor_weight, NeighborWeight::Unit),
            "normalized" => prop_assert_eq!(parsed.unwrap().memory.neighbor_weight, NeighborWeight::Normalized),
            _ => prop_assert!(parsed.is_err()),
        }
    }

    #[test]
    fn bcubed_lies_in_unit_interval(
        pairs in prop::collection::vec((0u32..6, 0u32..6), 1..60),
    ) {
        let (predicted, truth): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let f = bcubed_f1(&predicted, &truth);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&f), "{}", f);
        prop_assert!((bcubed_f1(&truth, &truth) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn both_weight_names_round_trip() {
    for name in ["unit", "normalized"] {
        let cfg = RunConfig::from_toml(&format!("version = 1\n[memory]\nneighbor_weight = \"{name}\"\n")).unwrap();
        assert!(cfg.to_toml().unwrap().contains(&format!("neighbor_weight = \"{name}\"")));
    }
}
