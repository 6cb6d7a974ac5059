//! Image loading, splitting and batching, model construction, and metric
//! reporting through the public API.

use std::collections::HashSet;

use image::{Rgb, RgbImage};
use malaria_core::data::{
    batch_iter, class_counts, epoch_order, load_image_dataset, load_png, split_811,
    synthetic_dataset, CLASS_NAMES,
};
use malaria_core::metrics::{
    accuracy_chart_svg, chart_sidecar, confusion_matrix, emit_accuracy_chart, evaluate_predictions,
    parse_report_csv, prf, read_chart_csv, render_report, rmse, roc_auc, Confusion, PredictionSet,
    ReportFormat,
};
use malaria_core::zoo::{build, count_params, model_summary, Architecture, BuildOptions};
use malaria_core::{Error, Model, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn png_loading_and_resize() {
    let dir = tempfile::tempdir().unwrap();
    let white = dir.path().join("white.png");
    RgbImage::from_pixel(2, 2, Rgb([255, 255, 255]))
        .save(&white)
        .unwrap();
    assert!(load_png(&white, [2, 2])
        .unwrap()
        .data()
        .iter()
        .all(|v| *v == 1.0));

    let checker = dir.path().join("checker.png");
    RgbImage::from_fn(4, 4, |x, y| {
        if (x + y) % 2 == 0 {
            Rgb([255; 3])
        } else {
            Rgb([0; 3])
        }
    })
    .save(&checker)
    .unwrap();
    let small = load_png(&checker, [2, 2]).unwrap();
    assert_eq!(small.shape(), &[2, 2, 3]);
    assert!(small
        .data()
        .iter()
        .all(|v| (v - 0.5).abs() <= 1.0 / 255.0 + 1e-6));
}

#[test]
fn corpus_directory_layout_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let d = dir.path().join(class);
        std::fs::create_dir(&d).unwrap();
        for i in 0..3 {
            RgbImage::from_pixel(5, 7, Rgb([label as u8 * 200, 10, 10]))
                .save(d.join(format!("c{i}.png")))
                .unwrap();
        }
    }
    std::fs::write(
        dir.path().join("Parasitized").join("broken.png"),
        b"not a png",
    )
    .unwrap();
    let (records, report) = load_image_dataset(dir.path(), [8, 8]).unwrap();
    assert_eq!(records.len(), 6);
    assert_eq!(report.skipped.len(), 1);
    assert!(records.iter().all(|r| r.pixels.shape() == [8, 8, 3]));
    assert_eq!(class_counts(&records, &(0..6).collect::<Vec<_>>()), [3, 3]);

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_image_dataset(missing.path(), [8, 8]),
        Err(Error::Layout(_))
    ));
}

#[test]
fn split_examples() {
    assert_eq!(
        split_811(27_558, 1).unwrap().sizes(),
        (22_046, 2_756, 2_756)
    );
    assert_eq!(split_811(10, 1).unwrap().sizes(), (8, 1, 1));
    let a = split_811(500, 3).unwrap();
    assert_eq!(a, split_811(500, 3).unwrap());
    let b = split_811(500, 4).unwrap();
    assert_ne!(a.train, b.train);
    assert_eq!(a.sizes(), b.sizes());
}

#[test]
fn batching_examples() {
    let records = synthetic_dataset(100, [16, 16], 1).unwrap();
    let idx: Vec<usize> = (0..100).collect();
    let sizes: Vec<usize> = batch_iter::<f32>(&records, &idx, 32, 7, 0)
        .unwrap()
        .map(|b| b.len())
        .collect();
    assert_eq!(sizes, vec![32, 32, 32, 4]);
    let all: Vec<usize> = (0..1000).collect();
    let e0 = epoch_order(&all, 7, 0);
    let e1 = epoch_order(&all, 7, 1);
    let moved = e0.iter().zip(&e1).filter(|(a, b)| a != b).count();
    assert!(moved >= 990);
}

#[test]
fn synthetic_examples() {
    let records = synthetic_dataset(2000, [32, 32], 5).unwrap();
    assert_eq!(
        class_counts(&records, &(0..2000).collect::<Vec<_>>()),
        [1000, 1000]
    );
    assert!(records
        .iter()
        .all(|r| r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions(n in 10usize..5000, seed in any::<u64>()) {
        let s = split_811(n, seed).unwrap();
        let mut seen: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(s.validation.len() == s.test.len());
    }

    #[test]
    fn epoch_batches_are_a_permutation(n in 1usize..300, bs in 1usize..64, epoch in 0u64..5) {
        let records = synthetic_dataset(2, [16, 16], 1).unwrap();
        let idx: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let total: usize = batch_iter::<f32>(&records, &idx, bs, 3, epoch).unwrap().map(|b| b.len()).sum();
        prop_assert_eq!(total, n);
        let mut order = epoch_order(&(0..n).collect::<Vec<_>>(), 3, epoch);
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn f1_between_precision_and_recall(tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tp in 1u64..50) {
        let r = prf(&Confusion { tn, fp, fn_, tp });
        let p = r.per_class[1];
        prop_assert!(p.precision.min(p.recall) <= p.f1 + 1e-12 && p.f1 <= p.precision.max(p.recall) + 1e-12);
    }
}

#[test]
fn every_architecture_runs_forward() {
    for arch in Architecture::ALL {
        let opts = BuildOptions {
            scale: 0.125,
            ..BuildOptions::default()
        };
        let model: Model<f32> = build(arch, &[64, 64, 3], &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..2 * 64 * 64 * 3)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let probs = model
            .infer(&Tensor::from_vec(&[2, 64, 64, 3], x).unwrap())
            .unwrap();
        assert_eq!(probs.shape(), &[2, 2], "{arch}");
        for row in probs.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6, "{arch}");
        }
        let c = count_params(&model);
        let (t, nt) = c
            .per_node
            .iter()
            .fold((0, 0), |(a, b), (_, t, n)| (a + t, b + n));
        assert_eq!((t, nt), (c.trainable, c.non_trainable));
        assert!(model_summary(&model).contains(&format!("total {}", c.total())));
    }
}

#[test]
fn custom_cnn_anchors_and_summary() {
    let model: Model<f32> = build(
        Architecture::CustomCnn,
        &[128, 128, 3],
        &BuildOptions::default(),
    )
    .unwrap();
    let c = count_params(&model);
    assert_eq!(
        [
            c.prefix_total("block1_"),
            c.prefix_total("block2_"),
            c.prefix_total("block3_")
        ],
        [1024, 18752, 74368]
    );
    assert_eq!(c.node("predictions"), Some((258, 0)));
    let summary = model_summary(&model);
    assert_eq!(
        summary.lines().filter(|l| l.contains(" conv2d ")).count(),
        3
    );
    let opts = BuildOptions {
        scale: 1.0,
        ..BuildOptions::default()
    };
    let vgg: Model<f32> = build(Architecture::Vgg19, &[128, 128, 3], &opts).unwrap();
    assert_eq!(count_params(&vgg).trainable, 4_195_842);
}

#[test]
fn alexnet_rejects_tiny_input() {
    let r: malaria_core::Result<Model<f32>> = build(
        Architecture::AlexNet,
        &[32, 32, 3],
        &BuildOptions::default(),
    );
    assert!(r.is_err());
}

#[test]
fn metric_examples() {
    let c = confusion_matrix(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
    assert_eq!((c.tp, c.fn_, c.tn, c.fp), (1, 1, 1, 1));
    let r = prf(&c);
    assert_eq!(
        (
            r.per_class[1].precision,
            r.per_class[1].recall,
            r.per_class[1].f1
        ),
        (0.5, 0.5, 0.5)
    );
    let perfect = prf(&confusion_matrix(&[0, 1, 1], &[0, 1, 1]).unwrap());
    assert!(perfect
        .per_class
        .iter()
        .all(|p| p.precision == 1.0 && p.recall == 1.0 && p.f1 == 1.0));

    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(
        roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(),
        0.75
    );
    assert_eq!(roc_auc(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
    assert!(matches!(
        roc_auc(&[0.3, 0.4], &[1, 1]),
        Err(Error::UndefinedMetric(_))
    ));

    assert_eq!(rmse(&[0.0, 1.0], &[0, 1]).unwrap(), 0.0);
    assert_eq!(rmse(&[0.5], &[1]).unwrap(), 0.5);
    assert_eq!(rmse(&[0.5; 5], &[0, 1, 1, 0, 1]).unwrap(), 0.5);
}

#[test]
fn report_rendering() {
    let preds = PredictionSet::new(vec![0.9, 0.2, 0.7, 0.4], vec![1, 0, 1, 1]).unwrap();
    let report = evaluate_predictions(&preds).unwrap();
    let rows = vec![
        ("XceptionNet".to_string(), report.clone()),
        ("AlexNet".to_string(), report),
    ];
    let csv = render_report(&rows, ReportFormat::Csv).unwrap();
    let parsed = parse_report_csv(&csv).unwrap();
    assert_eq!(parsed.len(), 2);
    assert_eq!(parsed[0].method, "XceptionNet");
    assert_eq!(parsed[0].accuracy, 0.75);
    assert!(matches!(
        render_report(&[], ReportFormat::Table),
        Err(Error::Argument(_))
    ));

    let mut exact = rows[0].1.clone();
    exact.accuracy = 0.9755;
    let table = render_report(&[("XceptionNet".to_string(), exact)], ReportFormat::Table).unwrap();
    assert!(table.contains("97.55%"));
}

#[test]
fn chart_bars_and_sidecar() {
    let entries: Vec<(String, f64)> = Architecture::ALL
        .iter()
        .enumerate()
        .map(|(i, a)| (a.display_name().to_string(), 0.5 + 0.07 * i as f64))
        .collect();
    let svg = accuracy_chart_svg(&entries).unwrap();
    assert_eq!(svg.matches("class=\"bar\"").count(), 6);
    let names: HashSet<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chart.svg");
    emit_accuracy_chart(&entries, &path).unwrap();
    assert_eq!(read_chart_csv(&chart_sidecar(&path)).unwrap(), entries);
    assert_eq!(
        accuracy_chart_svg(&entries[..1])
            .unwrap()
            .matches("class=\"bar\"")
            .count(),
        1
    );
}

#[test]
fn parameter_totals_grow_with_scale() {
    for arch in Architecture::ALL {
        let totals: Vec<usize> = [0.125, 0.25, 0.5]
            .iter()
            .map(|&scale| {
                let opts = BuildOptions {
                    scale,
                    ..BuildOptions::default()
                };
                let m: Model<f32> = build(arch, &[64, 64, 3], &opts).unwrap();
                count_params(&m).total()
            })
            .collect();
        assert!(
            totals.windows(2).all(|w| w[0] <= w[1]),
            "{arch}: {totals:?}"
        );
    }
}
