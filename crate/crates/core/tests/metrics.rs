use proptest::prelude::*;
use vwv::dataio::{generate_dataset, load_dataset, mask_path, write_mask, DatasetConfig, SynthConfig};
use vwv::metrics::{
    boundary_f, evaluate, evaluate_run, iou, j_decay, write_report, EvalConfig, MetricsError, VideoEval, CSV_HEADER,
};
use vwv::LabelMap;

fn label_map(w: usize, h: usize, labels: &[u8]) -> LabelMap {
    LabelMap::new(w, h, labels[..w * h].to_vec())
}

proptest! {
    #[test]
    fn scores_are_symmetric_rates(
        w in 1usize..9,
        h in 1usize..9,
        a in proptest::collection::vec(0u8..3, 64),
        b in proptest::collection::vec(0u8..3, 64),
        tol in 0usize..3,
    ) {
        let (p, g) = (label_map(w, h, &a), label_map(w, h, &b));
        for class in 1..3u8 {
            let j = iou(&p, &g, class).unwrap();
            prop_assert_eq!(j, iou(&g, &p, class).unwrap());
            prop_assert!((0.0..=1.0).contains(&j));
            let f = boundary_f(&p, &g, class, tol).unwrap();
            prop_assert_eq!(f, boundary_f(&g, &p, class, tol).unwrap());
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn decay_flips_sign_on_reversal(quarter in 1usize..5, values in proptest::collection::vec(0f32..1.0, 16)) {
        let s = &values[..4 * quarter];
        let mut r = s.to_vec();
        r.reverse();
        prop_assert!((j_decay(s).unwrap() + j_decay(&r).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn constant_sequences_have_no_decay(n in 4usize..40, v in 0f32..1.0) {
        prop_assert_eq!(j_decay(&vec![v; n]).unwrap(), 0.0);
    }
}

#[test]
fn decay_matches_clip_partition() {
    let s = [0.9, 0.8, 0.85, 0.7, 0.75, 0.6, 0.65, 0.5, 0.4, 0.45];
    // Ten frames split 3 / 3 / 2 / 2.
    let first = (0.9 + 0.8 + 0.85) / 3.0;
    let last = (0.4 + 0.45) / 2.0;
    assert!((j_decay(&s).unwrap() - (first - last) as f32).abs() < 1e-6);
}

fn small_benchmark(dir: &std::path::Path) {
    let cfg = DatasetConfig {
        train_videos: 0,
        test_videos: 3,
        seed: 1,
        video: SynthConfig {
            num_frames: 6,
            ..Default::default()
        },
    };
    generate_dataset(dir, &cfg).unwrap();
}

fn copy_predictions(gt: &std::path::Path, pred: &std::path::Path, f: impl Fn(usize, &LabelMap) -> LabelMap) {
    for v in load_dataset(gt, None).unwrap() {
        let dir = pred.join(&v.name);
        std::fs::create_dir_all(&dir).unwrap();
        for (t, m) in v.masks.iter().enumerate() {
            write_mask(&mask_path(&dir, t), &f(t, m.as_ref().unwrap())).unwrap();
        }
    }
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let gt = tempfile::tempdir().unwrap();
    let pred = tempfile::tempdir().unwrap();
    small_benchmark(gt.path());
    copy_predictions(gt.path(), pred.path(), |_, m| m.clone());
    let report = evaluate_run(pred.path(), gt.path(), None, &EvalConfig::default()).unwrap();
    assert_eq!((report.j_mean, report.f_mean, report.jf_mean), (1.0, 1.0, 1.0));
    assert_eq!(report.j_decay_mean, Some(0.0));
    let out = tempfile::tempdir().unwrap();
    write_report(out.path(), &report).unwrap();
    let csv = std::fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 4);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["objects"].as_array().unwrap().len(), 3);
}

#[test]
fn background_predictions_score_zero() {
    let gt = tempfile::tempdir().unwrap();
    let pred = tempfile::tempdir().unwrap();
    small_benchmark(gt.path());
    copy_predictions(gt.path(), pred.path(), |t, m| {
        if t == 0 {
            m.clone()
        } else {
            LabelMap::filled(m.width, m.height, 0)
        }
    });
    let report = evaluate_run(pred.path(), gt.path(), None, &EvalConfig::default()).unwrap();
    assert!(report.objects.iter().all(|o| o.j_mean == 0.0));
}

#[test]
fn aggregates_are_hand_averages() {
    let gt: Vec<Option<LabelMap>> = (0..5)
        .map(|_| Some(LabelMap::from_fn(4, 4, |x, _| u8::from(x < 2))))
        .collect();
    let shifted = LabelMap::from_fn(4, 4, |x, _| u8::from((1..3).contains(&x)));
    let half = LabelMap::from_fn(4, 4, |x, y| u8::from(x < 2 && y < 2));
    let empty = LabelMap::filled(4, 4, 0);
    let runs: Vec<Vec<LabelMap>> = vec![
        vec![gt[0].clone().unwrap(); 5],
        vec![
            gt[0].clone().unwrap(),
            shifted.clone(),
            shifted.clone(),
            half.clone(),
            half,
        ],
        vec![
            gt[0].clone().unwrap(),
            empty.clone(),
            empty.clone(),
            empty.clone(),
            empty,
        ],
    ];
    let names = ["c", "a", "b"];
    let evals: Vec<VideoEval<'_>> = runs
        .iter()
        .zip(names)
        .map(|(p, name)| VideoEval {
            name,
            num_classes: 1,
            predictions: p,
            ground_truth: &gt,
        })
        .collect();
    let cfg = EvalConfig {
        boundary_tolerance: Some(0),
    };
    let report = evaluate(&evals, &cfg).unwrap();
    // Per-video J: 1, (1/3 + 1/3 + 1/2 + 1/2) / 4, 0.
    let j_a = (1.0 / 3.0 + 1.0 / 3.0 + 0.5 + 0.5) / 4.0;
    assert!((report.j_mean - (1.0 + j_a + 0.0) / 3.0).abs() < 1e-6);
    let f_mean = report.objects.iter().map(|o| o.f_mean).sum::<f64>() / 3.0;
    assert!((report.f_mean - f_mean).abs() < 1e-12);
    assert!((report.jf_mean - (report.j_mean + report.f_mean) / 2.0).abs() < 1e-9);
    let order: Vec<&str> = report.objects.iter().map(|o| o.video.as_str()).collect();
    assert_eq!(order, vec!["a", "b", "c"]);

    let reversed: Vec<VideoEval<'_>> = evals.into_iter().rev().collect();
    assert_eq!(evaluate(&reversed, &cfg).unwrap(), report);
}

#[test]
fn short_prediction_sequence_is_rejected() {
    let gt = vec![Some(LabelMap::filled(2, 2, 1)); 3];
    let pred = vec![LabelMap::filled(2, 2, 1); 2];
    let v = VideoEval {
        name: "v",
        num_classes: 1,
        predictions: &pred,
        ground_truth: &gt,
    };
    assert!(matches!(
        evaluate(&[v], &EvalConfig::default()),
        Err(MetricsError::MissingFrames {
            expected: 3,
            found: 2,
            ..
        })
    ));
    let bad = vec![LabelMap::filled(2, 2, 4); 3];
    let v = VideoEval {
        name: "v",
        num_classes: 1,
        predictions: &bad,
        ground_truth: &gt,
    };
    assert!(matches!(
        evaluate(&[v], &EvalConfig::default()),
        Err(MetricsError::LabelMismatch { label: 4, .. })
    ));
}
