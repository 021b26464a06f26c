use panda_core::checkpoint::{Checkpoint, MetaValue};
use panda_core::config::{make_run_config, ConfigValue, CONFIG_KEYS};
use panda_core::data::{batch_order, make_leave_one_out, LabeledSample, RawImage};
use panda_core::image::{denormalize_value, normalize_image, normalize_value, Label};
use panda_core::metrics::{auprc, roc_auc};
use panda_core::scoring::{combine_scores, minmax_normalize, ScoreRecord};
use panda_core::tensor::Tensor;
use panda_core::Error;
use proptest::prelude::*;

fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..6).prop_map(|v| f64::from(v) / 5.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, l)| {
                l.iter().any(|&b| b) && l.iter().any(|&b| !b)
            })
    })
}

proptest! {
    #[test]
    fn normalization_is_affine_monotone_and_invertible(v in any::<u8>(), w in any::<u8>()) {
        let a = normalize_value(v);
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert_eq!(denormalize_value(a), v);
        prop_assert_eq!(v < w, a < normalize_value(w));
        prop_assert!((a - (f64::from(v) / 255.0 - 0.5) / 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalized_images_stay_in_range(px in prop::collection::vec(any::<u8>(), 12)) {
        let t = normalize_image(&px, [3, 2, 2]).unwrap();
        prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn auc_matches_pairwise_enumeration((s, l) in scores_and_labels()) {
        prop_assert!((roc_auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_rank_based((s, l) in scores_and_labels()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert!((roc_auc(&s, &l).unwrap() - roc_auc(&t, &l).unwrap()).abs() <= 1e-12);
        let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
        prop_assert!((roc_auc(&s, &flipped).unwrap() - (1.0 - roc_auc(&s, &l).unwrap())).abs() <= 1e-12);
    }

    #[test]
    fn auprc_in_unit_interval((s, l) in scores_and_labels()) {
        let a = auprc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0 + 1e-15).contains(&a));
    }

    #[test]
    fn minmax_contract(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let out = minmax_normalize(&v).unwrap();
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (a, x) in v.iter().zip(&out) {
            if lo == hi {
                prop_assert_eq!(*x, 0.5);
            } else if *a == lo {
                prop_assert_eq!(*x, 0.0);
            } else if *a == hi {
                prop_assert_eq!(*x, 1.0);
            }
        }
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }

    #[test]
    fn combined_ranking_survives_positive_scaling(
        comps in prop::collection::vec((0.0f64..50.0, 0.001f64..0.999, 0.001f64..0.999), 1..30),
        w in (0.0f64..3.0, 0.0f64..3.0, 0.01f64..3.0),
        k in 0.01f64..100.0,
    ) {
        let recs: Vec<ScoreRecord> = comps
            .iter()
            .enumerate()
            .map(|(i, &(r, a, b))| ScoreRecord {
                id: format!("{i}"),
                recon_err: r,
                c_x: a,
                c_x_prime: b,
                combined: 0.0,
                normalized: 0.0,
                label: Label::Unknown,
            })
            .collect();
        let mut x = recs.clone();
        let mut y = recs;
        combine_scores(&mut x, [w.0, w.1, w.2]);
        combine_scores(&mut y, [k * w.0, k * w.1, k * w.2]);
        for i in 0..x.len() {
            for j in 0..x.len() {
                if x[i].combined < x[j].combined && (x[j].combined - x[i].combined) > 1e-9 * x[j].combined.abs().max(1.0) {
                    prop_assert!(y[i].combined < y[j].combined);
                }
            }
        }
    }

    #[test]
    fn batches_cover_each_item_once(n in 1usize..60, b in 1usize..20, seed in any::<u64>(), epoch in 0u64..5, shuffle in any::<bool>()) {
        let order = batch_order(n, b, shuffle, seed, epoch).unwrap();
        prop_assert_eq!(order.len(), n.div_ceil(b));
        let mut all = order.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation_is_total(
        entries in prop::collection::vec(
            (
                prop::sample::select(CONFIG_KEYS.iter().map(|(k, _)| *k).chain(["bogus.key"]).collect::<Vec<_>>()),
                prop_oneof![
                    (-100i64..5000).prop_map(ConfigValue::Int),
                    (-2.0f64..2.0).prop_map(ConfigValue::Float),
                    any::<bool>().prop_map(ConfigValue::Bool),
                    prop::sample::select(vec!["pwl", "pl-g", "concat", "multiply", "x"]).prop_map(|s| ConfigValue::Str(s.into())),
                    prop::collection::vec(-1.0f64..2.0, 0..4).prop_map(ConfigValue::List),
                ],
            ),
            0..6,
        )
    ) {
        match make_run_config(entries.iter().map(|(k, v)| (*k, v))) {
            Ok(cfg) => prop_assert!(cfg.validate().is_ok()),
            Err(e) => prop_assert!(!e.to_string().is_empty()),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical(
        meta in prop::collection::vec(("[a-z.]{1,12}", any::<i64>()), 0..5),
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..4),
    ) {
        let mut ck = Checkpoint::new();
        for (k, v) in &meta {
            ck.push_meta(k.clone(), MetaValue::Int(*v));
        }
        for (i, s) in shapes.iter().enumerate() {
            ck.push_tensor(format!("t{i}"), Tensor::from_fn(s, |j| j as f32 * 0.25 - 1.0));
        }
        let a = ck.encode();
        let back = Checkpoint::decode(&a).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.encode(), a);
    }

    #[test]
    fn leave_one_out_keeps_anomalies_out_of_training(classes in 2u32..5, per in 1usize..8, pick in 0u32..5) {
        let samples: Vec<LabeledSample> = (0..classes)
            .flat_map(|c| (0..per).map(move |i| LabeledSample {
                id: format!("c{c}_{i}"),
                class: c,
                image: RawImage::new(1, 1, 1, vec![0]).unwrap(),
            }))
            .collect();
        match make_leave_one_out(&samples, pick) {
            Ok(h) => {
                let prefix = format!("c{pick}_");
                prop_assert!(h.train_normal.iter().all(|s| !s.id.starts_with(&prefix)));
                prop_assert_eq!(h.test_anomalous.len(), per);
            }
            Err(Error::UnknownClass(c)) => prop_assert!(c >= classes),
            Err(Error::EmptyTrainSplit) => prop_assert!(per < 2),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }
}

#[test]
fn leave_one_out_counts() {
    let samples: Vec<LabeledSample> = (0..10)
        .flat_map(|c| {
            (0..100).map(move |i| LabeledSample {
                id: format!("{c}/{i:03}"),
                class: c,
                image: RawImage::new(1, 1, 1, vec![0]).unwrap(),
            })
        })
        .collect();
    let h = make_leave_one_out(&samples, 0).unwrap();
    assert_eq!(h.train_normal.len(), 720);
    assert_eq!(h.test_normal.len(), 180);
    assert_eq!(h.test_anomalous.len(), 100);
    assert_eq!(
        make_leave_one_out(&samples, 11),
        Err(Error::UnknownClass(11))
    );
    let single: Vec<_> = samples.into_iter().filter(|s| s.class == 3).collect();
    assert_eq!(make_leave_one_out(&single, 3), Err(Error::EmptyTrainSplit));
}
