use std::path::Path;

use panda::config_file::{config_to_toml, parse_config_text};
use panda::core::config::{make_run_config, AdversarialForm, LossMode, RunConfig, SkipMode};
use panda::eval::{
    auc_confidence_interval, parse_report, render_report, MetricsReport, ReportFormat, RunMetrics,
};
use proptest::prelude::*;

fn runs() -> impl Strategy<Value = Vec<RunMetrics>> {
    prop::collection::vec(
        (
            0u64..1000,
            0.0f64..=1.0,
            0.0f64..=1.0,
            0.0f64..50.0,
            0.0f64..1.0,
            0.0f64..100.0,
        ),
        1..7,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(seed, auc, auprc, rec, adv, lat)| RunMetrics {
                seed,
                auc,
                auprc,
                avg_rec_err: rec,
                avg_adv_err: adv,
                latency_ms: lat,
            })
            .collect()
    })
}

fn configs() -> impl Strategy<Value = RunConfig> {
    (
        prop::sample::select(vec![16usize, 32, 64]),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        prop::sample::select(vec![SkipMode::Multiply, SkipMode::Concat]),
        1e-7f64..1e-2,
        any::<u32>(),
        prop::collection::vec(0.0f64..4.0, 3),
        prop::option::of("[a-z]{1,8}\\.pnda"),
        any::<bool>(),
    )
        .prop_map(
            |(size, high, e1h, e1l, skip, lr, seed, w, extractor, minimax)| RunConfig {
                image_size: size,
                enable_high_path: high,
                enable_e1_high: high && e1h,
                enable_e1_low: e1l,
                skip_mode: skip,
                lr_generator: lr,
                seed: u64::from(seed),
                score_weights: [w[0], w[1], w[2] + 0.1],
                loss_mode: if extractor.is_some() {
                    LossMode::PlProblemSpecific
                } else {
                    LossMode::Pwl
                },
                extractor_path: extractor,
                adversarial: if minimax {
                    AdversarialForm::Minimax
                } else {
                    AdversarialForm::NonSaturating
                },
                ..RunConfig::default()
            },
        )
}

proptest! {
    #[test]
    fn reports_round_trip_in_both_formats(runs in runs(), created in 0u64..2_000_000_000) {
        let r = MetricsReport::from_runs(&RunConfig::default(), &runs, created).unwrap();
        for format in [ReportFormat::Toml, ReportFormat::Csv] {
            let back = parse_report(&render_report(&r, format), format).unwrap();
            prop_assert_eq!(&back, &r);
        }
    }

    #[test]
    fn interval_brackets_the_reported_auc(runs in runs()) {
        let r = MetricsReport::from_runs(&RunConfig::default(), &runs, 0).unwrap();
        let (lo, hi) = r.auc_ci_95;
        prop_assert!(0.0 <= lo && lo <= r.auc && r.auc <= hi && hi <= 1.0, "{lo} {} {hi}", r.auc);
    }

    #[test]
    fn wider_level_gives_wider_interval(aucs in prop::collection::vec(0.0f64..=1.0, 3..8)) {
        let (a, b) = auc_confidence_interval(&aucs, 0.8).unwrap();
        let (c, d) = auc_confidence_interval(&aucs, 0.95).unwrap();
        prop_assert!(c <= a && b <= d);
    }

    #[test]
    fn config_file_round_trip(cfg in configs()) {
        let text = config_to_toml(&cfg);
        let entries = parse_config_text(&text, Path::new("cfg.toml")).unwrap();
        let back = make_run_config(entries.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
