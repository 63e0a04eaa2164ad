mod common;

use std::collections::BTreeMap;

use common::{pairwise_auc, random_spec};
use fcnn_core::evalbench::{interior_discrepancy, patch_scan, roc_auc};
use fcnn_core::netspec::{format_spec, receptive_field};
use fcnn_core::scenedata::{build_dataset, SceneConfig, Split, SplitRatios};
use fcnn_core::tensor::concat_channels;
use fcnn_core::training::pool_labels;
use fcnn_core::{init_network, parse_spec, Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, shape.len()).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

proptest! {
    #[test]
    fn spec_round_trips_through_its_string_form(seed in any::<u64>(), pools in 0usize..3) {
        let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(seed), pools);
        let text = format_spec(&spec);
        prop_assert_eq!(parse_spec(&text).unwrap(), spec.clone());
        let shouty = text.to_uppercase().replace(' ', "");
        prop_assert_eq!(parse_spec(&shouty).unwrap(), spec);
    }

    #[test]
    fn concat_then_slice_recovers_parts(
        (a, b) in (1usize..4, 1usize..4, 1usize..5, 1usize..5)
            .prop_flat_map(|(ca, cb, h, w)| (tensor(Shape::new(ca, h, w)), tensor(Shape::new(cb, h, w))))
    ) {
        let joined = concat_channels(&[&a, &b]).unwrap();
        prop_assert_eq!(joined.channels(), a.channels() + b.channels());
        prop_assert_eq!(joined.slice_channels(0, a.channels()).unwrap(), a.clone());
        prop_assert_eq!(joined.slice_channels(a.channels(), joined.channels()).unwrap(), b);
    }

    #[test]
    fn label_pooling_commutes_with_flip(
        mask in (1usize..4, 1usize..4).prop_flat_map(|(h, w)| {
            prop::collection::vec(prop::bool::ANY, 16 * h * w).prop_map(move |bits| {
                Tensor::from_vec(Shape::new(1, 4 * h, 4 * w), bits.into_iter().map(f64::from).collect()).unwrap()
            })
        })
    ) {
        let pooled = pool_labels(&mask).unwrap();
        prop_assert_eq!(pool_labels(&mask.flip_horizontal()).unwrap(), pooled.flip_horizontal());
        prop_assert!(pooled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        points in prop::collection::vec((0u8..20, any::<bool>()), 2..1000)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
    ) {
        let scores: Vec<f64> = points.iter().map(|p| f64::from(p.0) / 20.0).collect();
        let labels: Vec<bool> = points.iter().map(|p| p.1).collect();
        let curve = roc_auc(&scores, &labels).unwrap();
        prop_assert!((curve.auc - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        prop_assert_eq!(curve.points.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(curve.points.last().copied(), Some((1.0, 1.0)));
        prop_assert!(curve.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn auc_is_invariant_under_monotone_rescaling(
        points in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..200)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
    ) {
        let scores: Vec<f64> = points.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = points.iter().map(|p| p.1).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap().auc, roc_auc(&squashed, &labels).unwrap().auc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenes_never_straddle_splits(seed in any::<u64>(), n in 2usize..7, clips in 1usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let base = SceneConfig { height: 64, width: 64, frames: 2, ..SceneConfig::default() };
        let ratios = SplitRatios { train: 0.5, val: 0.25, test: 0.25 };
        let m = build_dataset(dir.path(), n, clips, ratios, seed, &base).unwrap();
        let mut seen: BTreeMap<usize, Split> = BTreeMap::new();
        for c in &m.clips {
            let scene_split = m.scenes[c.scene_id].split;
            prop_assert_eq!(c.split, scene_split);
            prop_assert_eq!(*seen.entry(c.scene_id).or_insert(c.split), c.split);
        }
        let (tr, va, te) = ratios.counts(n).unwrap();
        prop_assert_eq!(m.scenes_in(Split::Train).len(), tr);
        prop_assert_eq!(m.scenes_in(Split::Val).len(), va);
        prop_assert_eq!(m.scenes_in(Split::Test).len(), te);
        prop_assert_eq!(m.clips.len(), n * clips);
    }

    #[test]
    fn exact_patch_scan_equals_full_frame(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 2);
        let g = receptive_field(&spec).unwrap();
        let (patch, _) = g.exact_scan_patch();
        let net = init_network(&spec, seed).unwrap();
        let size = (patch + g.output_stride()).next_multiple_of(4);
        let image = Tensor::from_fn(Shape::new(1, size, size), |c, y, x| ((seed as usize + 31 * y + 7 * x + c) % 97) as f64 / 97.0);
        let full = net.predict(&image).unwrap();
        let scan = patch_scan(&net, &image, patch, g.output_stride()).unwrap();
        prop_assert_eq!(interior_discrepancy(&g, &full, &scan, size, size).unwrap(), 0.0);
    }
}
