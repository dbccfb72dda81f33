//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use openset_core::anchor::{anchor_loss, anchor_loss_grad, class_centres, combined_loss, ClassificationLoss};
use openset_core::dataset::{
    annotation_set_from_voc, open_set_split, parse_voc_xml, Annotation, AnnotationSet,
    CategoryInfo, ImageInfo, KnownSpec,
};
use openset_core::eval::{
    auroc_from_scores, average_precision, iou, map_at_iou, roc_curve, BBox, Method,
};
use openset_core::extraction::{score_detections, Detection, GroundTruthObject, Normalisation};
use openset_core::gmm::{fit_gmm, gmm_log_likelihood, ClassGmm, EmConfig, GaussianComponent, GmmMeta, GmmSet};
use openset_core::toy::{fit_and_evaluate, train_and_export, FitSettings, PipelineResult, ToyScenario};
use openset_core::trainer::ToyHeadConfig;

use common::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1001);
    let (mut worst_anchor, mut worst_combined) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 2 + (uniform(&mut r, 0.0, 14.0) as usize);
        let centres = class_centres(n, 10.0).map_err(|e| e.to_string())?;
        let y = uniform(&mut r, 0.0, n as f64) as usize;
        let l: Vec<f64> = (0..n).map(|_| uniform(&mut r, -15.0, 15.0)).collect();
        let lambda = uniform(&mut r, 0.0, 1.0);
        let g = anchor_loss_grad(&l, y, &centres).unwrap();
        let fd = finite_difference(|x| anchor_loss(x, y, &centres).unwrap(), &l, 1e-5);
        worst_anchor = worst_anchor.max(relative_error(&g, &fd));
        let ce = ClassificationLoss::CrossEntropy;
        let (_, g) = combined_loss(&l, y, &centres, lambda, ce).unwrap();
        let fd = finite_difference(|x| combined_loss(x, y, &centres, lambda, ce).unwrap().0, &l, 1e-5);
        worst_combined = worst_combined.max(relative_error(&g, &fd));
    }
    let elapsed = t.elapsed();
    ensure(worst_anchor < 1e-6, format!("anchor gradient rel err {worst_anchor:.2e}"))?;
    ensure(worst_combined < 1e-6, format!("combined gradient rel err {worst_combined:.2e}"))?;
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!(
        "100 points, worst rel err anchor {worst_anchor:.1e}, combined {worst_combined:.1e}, {elapsed:.0?}"
    ))
}

fn em_recovery() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1002);
    let means = [
        vec![0.0, 0.0, 0.0, 0.0, 0.0],
        vec![6.0, -5.0, 4.0, 6.0, -4.0],
    ];
    let weights = [0.35, 0.65];
    let covs = [random_spd(&mut r, 5, 0.6), random_spd(&mut r, 5, 0.5)];
    let samples: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let k = usize::from(uniform(&mut r, 0.0, 1.0) >= weights[0]);
            sample_mvn(&mut r, &means[k], &covs[k], 1).remove(0)
        })
        .collect();
    let model = fit_gmm(&samples, 2, &EmConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let comps = model.components();
    let dist = |c: &GaussianComponent, m: &[f64]| -> f64 {
        c.mean().iter().zip(m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    // Match fitted components to generators.
    let order = if dist(&comps[0], &means[0]) + dist(&comps[1], &means[1])
        <= dist(&comps[0], &means[1]) + dist(&comps[1], &means[0])
    {
        [0, 1]
    } else {
        [1, 0]
    };
    let mut worst_mean = 0.0f64;
    let mut worst_weight = 0.0f64;
    for (g, &f) in order.iter().enumerate() {
        worst_mean = worst_mean.max(dist(&comps[f], &means[g]));
        worst_weight = worst_weight.max((comps[f].weight() - weights[g]).abs());
    }
    ensure(worst_mean < 0.3, format!("mean error {worst_mean:.3}"))?;
    ensure(worst_weight < 0.05, format!("weight error {worst_weight:.3}"))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "max mean err {worst_mean:.3}, max weight err {worst_weight:.3}, {elapsed:.0?}"
    ))
}

fn likelihood_oracle() -> Outcome {
    let mut r = rng(1003);
    let mut worst_closed = 0.0f64;
    let mut worst_linear = 0.0f64;
    let mut linear_checked = 0;
    for q in 0..1000 {
        let d = 1 + q % 8;
        let mean = DVector::from_fn(d, |_, _| uniform(&mut r, -5.0, 5.0));
        let cov = random_spd(&mut r, d, 1.0);
        let single = ClassGmm::new(0, vec![GaussianComponent::new(1.0, mean.clone(), cov.clone(), 0).unwrap()])
            .unwrap();
        let x: Vec<f64> = (0..d).map(|_| uniform(&mut r, -10.0, 10.0)).collect();
        let got = gmm_log_likelihood(&single, &x).unwrap();
        let want = mvn_log_density(&x, &mean, &cov);
        worst_closed = worst_closed.max((got - want).abs() / want.abs().max(1.0));

        let mixture = ClassGmm::new(
            0,
            vec![
                GaussianComponent::new(0.3, mean.clone(), cov.clone(), 0).unwrap(),
                GaussianComponent::new(0.7, mean.map(|v| v + 1.5), random_spd(&mut r, d, 0.8), 1).unwrap(),
            ],
        )
        .unwrap();
        let linear = mixture_log_likelihood_linear(&mixture, &x);
        if linear.is_finite() {
            linear_checked += 1;
            let got = gmm_log_likelihood(&mixture, &x).unwrap();
            worst_linear = worst_linear.max((got - linear).abs() / linear.abs().max(1.0));
        }
    }
    ensure(worst_closed <= 1e-9, format!("closed-form error {worst_closed:.2e}"))?;
    ensure(worst_linear <= 1e-9, format!("linear-domain error {worst_linear:.2e}"))?;
    ensure(linear_checked > 900, format!("only {linear_checked} linear-domain checks"))?;
    Ok(format!(
        "1000 queries, closed-form err {worst_closed:.1e}, linear-domain err {worst_linear:.1e} ({linear_checked} checked)"
    ))
}

fn auroc_oracle() -> Outcome {
    let mut r = rng(1004);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let np = 1 + (uniform(&mut r, 0.0, 500.0) as usize);
        let nn = 1 + (uniform(&mut r, 0.0, 500.0) as usize);
        // Alternate between continuous scores and heavily tied ones.
        let draw = |r: &mut openset_core::Rng, shift: f64| -> f64 {
            let v = normal(r) + shift;
            if i % 2 == 0 { v } else { (v * 3.0).round() }
        };
        let pos: Vec<f64> = (0..np).map(|_| draw(&mut r, 0.7)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(&mut r, 0.0)).collect();
        let a = auroc_from_scores(&pos, &neg).unwrap();
        worst = worst.max((a - pairwise_auroc(&pos, &neg)).abs());
    }
    ensure(worst < 1e-9, format!("max deviation {worst:.2e}"))?;
    let hand = auroc_from_scores(&[0.9, 0.8, 0.2], &[0.7, 0.1]).unwrap();
    ensure(hand == 5.0 / 6.0, format!("hand case gave {hand}"))?;
    Ok(format!("100 instances, max deviation {worst:.1e}; hand case = 5/6 exactly"))
}

fn metric_hand_cases() -> Outcome {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    let v = iou(&a, &b);
    ensure(v == 1.0 / 3.0, format!("IoU {v}"))?;
    let ap = average_precision(&[true, false, true], 2);
    ensure(ap == 5.0 / 6.0, format!("AP {ap}"))?;
    let gt = |img: &str| GroundTruthObject {
        image_id: img.into(),
        bbox: a,
        class_id: 0,
        known: true,
    };
    let det = |img: &str, bbox: BBox, s: f64| Detection::from_logits(img, bbox, vec![s, 0.0], Normalisation::Softmax);
    let far = BBox::new(50.0, 50.0, 60.0, 60.0).unwrap();
    let dets = [det("a", a, 5.0), det("a", far, 4.0), det("b", a, 3.0)];
    let m = map_at_iou(&dets, &[gt("a"), gt("b")], 2, 0.5).unwrap();
    ensure(m.per_class_ap[&0] == 5.0 / 6.0, format!("matched AP {}", m.per_class_ap[&0]))?;
    let c = roc_curve(&[0.9, 0.8, 0.2], &[0.7, 0.1]).unwrap();
    // Strict counting at θ = 0.5: the curve point for any θ in [0.2, 0.7).
    let p = c.points.iter().rev().find(|p| p.threshold <= 0.5).unwrap();
    ensure((p.tpr, p.osr) == (2.0 / 3.0, 0.5), format!("TPR/OSR {:?}", (p.tpr, p.osr)))?;
    Ok("IoU = 1/3, AP = 5/6, TPR 2/3 / OSR 1/2 at θ = 0.5, all exact".into())
}

fn spread(r: &PipelineResult) -> f64 {
    let v: Vec<f64> = r.test_auroc_by_count.values().copied().collect();
    v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min)
}

fn toy_pipeline() -> Outcome {
    let t = Instant::now();
    let scenario = ToyScenario::default();
    let data = scenario.generate().map_err(|e| e.to_string())?;
    let settings = FitSettings::default();
    let mut results = Vec::new();
    for lambda in [0.1, 0.0] {
        let head = ToyHeadConfig {
            lambda,
            ..Default::default()
        };
        let run = train_and_export(&data, &head).map_err(|e| e.to_string())?;
        results.push(fit_and_evaluate(&run, &settings, scenario.n_known).map_err(|e| e.to_string())?);
    }
    let elapsed = t.elapsed();
    let anchor = &results[0];
    let au = |m: Method| anchor.report.method(m).unwrap().auroc;
    let (gmm, score, entropy) = (au(Method::Gmm), au(Method::Score), au(Method::Entropy));
    let (s_anchor, s_plain) = (spread(anchor), spread(&results[1]));
    let detail = format!(
        "selected M={}, AUROC gmm {gmm:.4} / score {score:.4} / entropy {entropy:.4}; \
         spread over M=1..6: λ=0.1 {s_anchor:.4} vs λ=0 {s_plain:.4}; {elapsed:.1?}",
        anchor.selection.selected
    );
    ensure(anchor.test_auroc_by_count.len() == 6, format!("fitted counts {:?}", anchor.test_auroc_by_count.keys()))?;
    ensure(gmm > score && gmm > entropy, format!("(a) failed: {detail}"))?;
    ensure(s_anchor <= s_plain, format!("(b) failed: {detail}"))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(detail)
}

fn coco_fixture(seed: u64) -> AnnotationSet {
    let mut r = rng(seed);
    let categories: Vec<CategoryInfo> = (1..=8)
        .map(|i| CategoryInfo {
            id: i,
            name: format!("class{i}"),
            extra: BTreeMap::new(),
        })
        .collect();
    let images: Vec<ImageInfo> = (1..=50)
        .map(|id| ImageInfo {
            id,
            file_name: format!("{id:012}.jpg"),
            width: 640,
            height: 480,
            extra: BTreeMap::new(),
        })
        .collect();
    let mut annotations = Vec::new();
    for im in &images {
        let n = uniform(&mut r, 0.0, 4.0) as usize;
        for _ in 0..n {
            annotations.push(Annotation {
                id: annotations.len() as u64 + 1,
                image_id: im.id,
                category_id: 1 + uniform(&mut r, 0.0, 8.0) as u64,
                bbox: [uniform(&mut r, 0.0, 300.0), uniform(&mut r, 0.0, 200.0), 40.0, 30.0],
                extra: BTreeMap::new(),
            });
        }
    }
    AnnotationSet {
        images,
        annotations,
        categories,
        extra: BTreeMap::new(),
    }
}

fn dataset_splitter() -> Outcome {
    let original = coco_fixture(1005);
    let text = original.to_json_string().unwrap();
    let run = || -> Result<(String, String), String> {
        let d = AnnotationSet::from_json_str(&text).map_err(|e| e.to_string())?;
        let s = open_set_split(&d, None, &KnownSpec::Prefix(6), None, 7).map_err(|e| e.to_string())?;
        Ok((
            s.train.to_json_string().unwrap(),
            serde_json::to_string(&s.manifest).unwrap(),
        ))
    };
    let first = run()?;
    ensure(first == run()?, "re-run output differs")?;
    let filtered = AnnotationSet::from_json_str(&first.0).unwrap();
    let unknown: HashSet<u64> = [7, 8].into();
    let tainted: HashSet<u64> = original
        .annotations
        .iter()
        .filter(|a| unknown.contains(&a.category_id))
        .map(|a| a.image_id)
        .collect();
    let want: BTreeSet<u64> = original.images.iter().map(|i| i.id).filter(|i| !tainted.contains(i)).collect();
    let got: BTreeSet<u64> = filtered.images.iter().map(|i| i.id).collect();
    ensure(got == want, "retained images differ from the brute-force set")?;
    ensure(
        filtered.annotations.iter().all(|a| !unknown.contains(&a.category_id)),
        "held-out annotation survived",
    )?;

    let xml = "<annotation><filename>x.jpg</filename><size><width>10</width><height>10</height></size>\
               <object><name>sofa</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object>\
               </annotation>";
    let voc = annotation_set_from_voc(&[parse_voc_xml(xml, "x.xml").unwrap()]);
    let s = open_set_split(&voc, None, &KnownSpec::Prefix(15), None, 0).map_err(|e| e.to_string())?;
    let (k, u) = (s.manifest.known.len(), s.manifest.unknown.len());
    ensure((k, u) == (15, 5), format!("VOC split {k}/{u}"))?;
    Ok(format!(
        "{} of 50 images retained (= brute force), no held-out annotations, byte-identical re-run, VOC {k}/{u}",
        got.len()
    ))
}

fn throughput() -> Outcome {
    let (n_classes, m) = (15, 6);
    let mut r = rng(1006);
    let models: Vec<ClassGmm> = (0..n_classes)
        .map(|c| {
            let comps = (0..m)
                .map(|j| {
                    let mean = DVector::from_fn(n_classes, |_, _| uniform(&mut r, -10.0, 10.0));
                    GaussianComponent::new(1.0 / m as f64, mean, random_spd(&mut r, n_classes, 1.0), j).unwrap()
                })
                .collect();
            ClassGmm::new(c, comps).unwrap()
        })
        .collect();
    let set = GmmSet::new(models, GmmMeta { n_components: m, ..Default::default() }).unwrap();
    let dets: Vec<Detection> = (0..1000)
        .map(|i| {
            let l = (0..n_classes).map(|_| uniform(&mut r, -10.0, 10.0)).collect();
            Detection::from_logits(i.to_string(), BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), l, Normalisation::Softmax)
        })
        .collect();
    // Warm-up, then best of three.
    score_detections(&set, &dets).unwrap();
    let best = (0..3)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(score_detections(&set, &dets).unwrap());
            t.elapsed()
        })
        .min()
        .unwrap();
    within(best, Duration::from_millis(100))?;
    Ok(format!("1000 detections × 15 classes × 6 components × 15-D in {best:.1?}"))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("EM recovery", em_recovery),
        ("likelihood oracle", likelihood_oracle),
        ("AUROC oracle", auroc_oracle),
        ("metric hand-cases", metric_hand_cases),
        ("toy open-set pipeline", toy_pipeline),
        ("dataset splitter", dataset_splitter),
        ("scoring throughput", throughput),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
