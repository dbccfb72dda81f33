mod common;

use std::collections::BTreeMap;

use openset_core::eval::BBox;
use openset_core::extraction::{
    build_training_logit_sets, normalise_scores, reject, select_theta_ose, Detection,
    GroundTruthObject, Normalisation, ScoredDetection, UncertaintyVector,
};
use proptest::prelude::*;

use common::*;

const N_CLASSES: usize = 4;

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    // Coarse grid so exact IoU ties actually occur.
    (0u8..8, 0u8..8, 1u8..6, 1u8..6).prop_map(|(x, y, w, h)| {
        let (x, y) = (x as f64 * 5.0, y as f64 * 5.0);
        [x, y, x + w as f64 * 5.0, y + h as f64 * 5.0]
    })
}

fn arb_detection() -> impl Strategy<Value = Detection> {
    (0u8..3, arb_box(), prop::collection::vec(-6.0f64..6.0, N_CLASSES)).prop_map(|(img, b, l)| {
        Detection::from_logits(
            img.to_string(),
            BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            l,
            Normalisation::Softmax,
        )
    })
}

fn arb_truth() -> impl Strategy<Value = GroundTruthObject> {
    (0u8..3, arb_box(), 0usize..N_CLASSES, prop::bool::weighted(0.8)).prop_map(|(img, b, c, known)| {
        GroundTruthObject {
            image_id: img.to_string(),
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            class_id: c,
            known,
        }
    })
}

/// Exhaustive pair scan: a detection joins the set of the known truth it
/// overlaps most (first such truth on ties) when both gates pass.
fn brute_force_sets(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    theta_iou: f64,
    theta_conf: f64,
) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut out: BTreeMap<usize, Vec<Vec<f64>>> = (0..N_CLASSES).map(|c| (c, Vec::new())).collect();
    for d in dets {
        let db = [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max];
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in gts.iter().enumerate() {
            if !t.known || t.image_id != d.image_id {
                continue;
            }
            let tb = [t.bbox.x_min, t.bbox.y_min, t.bbox.x_max, t.bbox.y_max];
            let v = iou_xyxy(db, tb);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, v)) = best {
            let c = gts[i].class_id;
            if v >= theta_iou && d.scores[c] >= theta_conf {
                out.get_mut(&c).unwrap().push(d.logits.clone());
            }
        }
    }
    out
}

fn scored(max_ll: f64) -> ScoredDetection {
    ScoredDetection {
        detection: Detection::from_logits(
            "0",
            BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            vec![0.0, 1.0],
            Normalisation::Softmax,
        ),
        uncertainty: UncertaintyVector {
            log_likelihoods: vec![max_ll, max_ll - 1.0],
            max_log_likelihood: max_ll,
            argmax_class: 0,
        },
    }
}

#[test]
fn fifty_detections_match_the_pair_oracle() {
    let mut r = rng(21);
    let boxes = |r: &mut openset_core::Rng| {
        let x = uniform(r, 0.0, 40.0);
        let y = uniform(r, 0.0, 40.0);
        BBox::new(x, y, x + uniform(r, 5.0, 30.0), y + uniform(r, 5.0, 30.0)).unwrap()
    };
    let gts: Vec<GroundTruthObject> = (0..20)
        .map(|i| GroundTruthObject {
            image_id: (i % 4).to_string(),
            bbox: boxes(&mut r),
            class_id: i % N_CLASSES,
            known: i % 5 != 0,
        })
        .collect();
    let dets: Vec<Detection> = (0..50)
        .map(|i| {
            let l = (0..N_CLASSES).map(|_| uniform(&mut r, -4.0, 8.0)).collect();
            Detection::from_logits((i % 4).to_string(), boxes(&mut r), l, Normalisation::Softmax)
        })
        .collect();
    for (ti, tc) in [(0.6, 0.7), (0.3, 0.4), (0.1, 0.2)] {
        let got = build_training_logit_sets(&dets, &gts, N_CLASSES, ti, tc).unwrap();
        assert_eq!(got.sets, brute_force_sets(&dets, &gts, ti, tc));
    }
}

proptest! {
    #[test]
    fn training_sets_match_the_pair_oracle(
        dets in prop::collection::vec(arb_detection(), 0..50),
        gts in prop::collection::vec(arb_truth(), 0..15),
        theta_iou in 0.05f64..1.0,
        theta_conf in 0.05f64..1.0,
    ) {
        let got = build_training_logit_sets(&dets, &gts, N_CLASSES, theta_iou, theta_conf).unwrap();
        let want = brute_force_sets(&dets, &gts, theta_iou, theta_conf);
        let empty: Vec<usize> = want.iter().filter(|(_, v)| v.is_empty()).map(|(c, _)| *c).collect();
        prop_assert_eq!(got.sets, want);
        prop_assert_eq!(got.empty_classes, empty);
    }

    #[test]
    fn softmax_sums_to_one(l in prop::collection::vec(-800.0f64..800.0, 1..20)) {
        let s = normalise_scores(&l, Normalisation::Softmax);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sigmoid_stays_in_the_unit_interval(l in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let s = normalise_scores(&l, Normalisation::Sigmoid);
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn rejection_partitions_and_is_monotone(
        lls in prop::collection::vec(-50.0f64..0.0, 0..40),
        t1 in -60.0f64..10.0,
        dt in 0.0f64..30.0,
    ) {
        let input: Vec<_> = lls.iter().map(|&v| scored(v)).collect();
        let (acc1, rej1) = reject(input.clone(), t1);
        prop_assert_eq!(acc1.len() + rej1.len(), input.len());
        prop_assert!(acc1.iter().all(|s| s.uncertainty.max_log_likelihood >= t1));
        prop_assert!(rej1.iter().all(|s| s.uncertainty.max_log_likelihood < t1));
        let (acc2, _) = reject(input, t1 + dt);
        prop_assert!(acc2.len() <= acc1.len());
        prop_assert!(acc2.iter().all(|s| acc1.contains(s)));
    }

    #[test]
    fn theta_ose_is_the_smallest_threshold_meeting_the_rate(
        neg in prop::collection::vec(-40.0f64..0.0, 1..60),
        rate in 0.0f64..1.0,
    ) {
        let t = select_theta_ose(&neg, rate).unwrap();
        let accepted = |t: f64| neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
        prop_assert!(accepted(t) <= rate);
        if t.is_finite() {
            prop_assert!(accepted(t.next_down()) > rate);
        }
    }
}

#[test]
fn rejection_examples() {
    let input: Vec<_> = [-5.0, -20.0, -3.0].iter().map(|&v| scored(v)).collect();
    let (acc, rej) = reject(input.clone(), -10.0);
    let lls = |v: &[ScoredDetection]| -> Vec<f64> {
        v.iter().map(|s| s.uncertainty.max_log_likelihood).collect()
    };
    assert_eq!(lls(&acc), vec![-5.0, -3.0]);
    assert_eq!(lls(&rej), vec![-20.0]);
    assert_eq!(reject(input.clone(), f64::NEG_INFINITY).0.len(), 3);
    assert_eq!(reject(input, f64::INFINITY).1.len(), 3);
}
