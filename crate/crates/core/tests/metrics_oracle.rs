use detflow_core::ingest::LabelMap;
use detflow_core::metrics::{evaluate, match_detections, Detection, GroundTruthSet, Protocol};
use detflow_testkit::eval::{brute_force_map, exhaustive_flags, Det, Gt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rect(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = rng.gen_range(0.0..0.7);
    let y = rng.gen_range(0.0..0.7);
    [x, y, x + rng.gen_range(0.05..0.3), y + rng.gen_range(0.05..0.3)]
}

#[test]
fn greedy_matching_equals_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2_000 {
        let anchor = rect(&mut rng);
        let jitter = |rng: &mut ChaCha8Rng, r: [f64; 4]| r.map(|v| v + rng.gen_range(-0.05..0.05));
        let gts: Vec<_> = (0..rng.gen_range(0..4)).map(|_| jitter(&mut rng, anchor)).collect();
        let dets: Vec<_> = (0..rng.gen_range(0..=4)).map(|_| jitter(&mut rng, anchor)).collect();
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        assert_eq!(match_detections(&dets, &gts, thr), exhaustive_flags(&dets, &gts, thr));
    }
}

#[test]
fn evaluate_equals_brute_force() {
    let lm = LabelMap::from_names(["a", "b", "c"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut gts = Vec::new();
        for _ in 0..rng.gen_range(1..=10) {
            gts.push(Gt { image: format!("i{}", rng.gen_range(0..3)), rect: rect(&mut rng), class: rng.gen_range(1..=3) });
        }
        let mut dets = Vec::new();
        for _ in 0..rng.gen_range(0..=10) {
            let r = if rng.gen_bool(0.5) && !gts.is_empty() {
                let g = &gts[rng.gen_range(0..gts.len())];
                g.rect.map(|v| v + rng.gen_range(-0.03..0.03))
            } else {
                rect(&mut rng)
            };
            let r = r.map(|v| v.clamp(0.0, 1.0));
            dets.push(Det { image: format!("i{}", rng.gen_range(0..3)), rect: r, class: rng.gen_range(1..=3), score: (rng.gen_range(0..5) as f64) / 4.0 });
        }
        let mut set = GroundTruthSet::default();
        for g in &gts {
            set.push(&g.image, g.rect, g.class);
        }
        let ours: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { image_id: d.image.clone(), bbox: d.rect, class_id: d.class, score: d.score })
            .collect();
        for p in Protocol::ALL {
            let report = evaluate(&ours, &set, p, &lm).unwrap();
            let (per_class, map) = brute_force_map(&dets, &gts, &p.iou_thresholds(), p == Protocol::Voc50ElevenPoint);
            assert_eq!(report.per_class_ap.keys().collect::<Vec<_>>(), per_class.keys().collect::<Vec<_>>());
            for (c, ap) in &per_class {
                assert!((report.per_class_ap[c] - ap).abs() <= 1e-12, "{p} class {c}");
            }
            assert!((report.map_value - map).abs() <= 1e-12);
        }
    }
}
