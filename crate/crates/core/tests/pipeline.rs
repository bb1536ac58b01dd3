use std::sync::Arc;
use std::time::Duration;

use detflow_core::augment::{AugmentationPlan, OpRegistry};
use detflow_core::config::{Architecture, Backbone, HyperParams, LrSchedule, ModelSpec, TrainingConfig};
use detflow_core::export::{bundle_archive, export_bundle, verify_bundle, ExportError};
use detflow_core::ingest::parse_labelmap_text;
use detflow_core::jobs::{JobManager, JobSettings, JobState, SimLauncher};
use detflow_core::metrics::{evaluate, Detection, GroundTruthSet, Protocol};
use detflow_core::preprocess::{run_preprocess, AnnotationFormat, OutputNames, PreprocessError, PreprocessRequest};
use detflow_core::records::{read_records, ExampleRecord};
use detflow_core::scheduler::Scheduler;
use detflow_core::workspace::{StoreSettings, WorkspaceId, WorkspaceStore};
use detflow_testkit::shapes::{annotations_csv, shapes_dataset};

fn store() -> (tempfile::TempDir, Arc<WorkspaceStore>, WorkspaceId) {
    let dir = tempfile::tempdir().unwrap();
    let settings = StoreSettings {
        hash_iterations: 1_000,
        ..Default::default()
    };
    let store = WorkspaceStore::open(dir.path(), settings).unwrap();
    let (_, ws) = store.create_account("ana", "correct horse").unwrap();
    (dir, Arc::new(store), ws.workspace_id)
}

fn upload_shapes(store: &WorkspaceStore, ws: &WorkspaceId, n: usize) {
    for img in shapes_dataset(n, 7) {
        store.put_file(ws, &format!("images/{}", img.filename), &img.png, None).unwrap();
        store.put_file(ws, &format!("annotations/{}", img.xml_name()), img.voc_xml().as_bytes(), None).unwrap();
    }
}

fn voc_request(ops: &[&str]) -> PreprocessRequest {
    PreprocessRequest {
        format: AnnotationFormat::VocXml,
        annotations: vec!["annotations".into()],
        images_dir: "images".into(),
        split_ratio: 0.8,
        seed: 3,
        augmentation: AugmentationPlan {
            enabled_ops: ops.iter().map(|s| s.to_string()).collect(),
            fraction: 0.5,
            ..Default::default()
        },
        outputs: OutputNames::default(),
    }
}

fn config(num_steps: u64, every: u64) -> TrainingConfig {
    TrainingConfig {
        model: ModelSpec::new(Architecture::Ssd, Backbone::MobileNetV2),
        hp: HyperParams {
            num_steps,
            batch_size: 1,
            lr: LrSchedule::constant(0.0002),
            num_classes: 2,
            checkpoint_every: every,
            augmentation: AugmentationPlan::default(),
        },
        labelmap_path: "data/labelmap.pbtxt".into(),
        train_record_path: "data/train.record".into(),
        eval_record_path: "data/eval.record".into(),
        extra: Default::default(),
    }
}

#[test]
fn voc_preprocess_counts() {
    let (_d, store, ws) = store();
    upload_shapes(&store, &ws, 20);
    let res = run_preprocess(&store, &ws, &voc_request(&["flip_h"]), &OpRegistry::builtin()).unwrap();
    assert_eq!((res.train_images, res.eval_images), (16, 4));
    assert_eq!(res.train_record.record_count, 24);
    assert_eq!(res.eval_record.record_count, 4);
    assert_eq!(res.augmented_images.len(), 8);
    assert!(res.augmented_images.iter().all(|p| p.starts_with("data/augmented/") && p.ends_with("_fliph.png")));
    let lm = parse_labelmap_text(&String::from_utf8(store.get_file(&ws, "data/labelmap.pbtxt").unwrap()).unwrap()).unwrap();
    assert_eq!(lm.name_of(1), Some("circle"));
    assert_eq!(lm.name_of(2), Some("square"));
    let train = read_records(store.get_file(&ws, "data/train.record").unwrap().as_slice()).unwrap();
    let decoded: Vec<ExampleRecord> = train.iter().map(|p| ExampleRecord::decode(p).unwrap()).collect();
    let pngs = decoded
        .iter()
        .filter(|e| e.bytes("image/filename").unwrap()[0].ends_with(b"_fliph.png"))
        .count();
    assert_eq!(pngs, 8);
}

#[test]
fn csv_matches_voc_and_output_names_follow_request() {
    let (_d, store, ws) = store();
    upload_shapes(&store, &ws, 10);
    let images = shapes_dataset(10, 7);
    store.put_file(&ws, "ann.csv", annotations_csv(&images).as_bytes(), None).unwrap();
    let mut req = voc_request(&[]);
    let voc = run_preprocess(&store, &ws, &req, &OpRegistry::builtin()).unwrap();
    req.format = AnnotationFormat::Csv;
    req.annotations = vec!["ann.csv".into()];
    req.outputs = OutputNames {
        output_dir: "csvrun".into(),
        labelmap: "lm.txt".into(),
        train_record: "tr.rec".into(),
        eval_record: "ev.rec".into(),
        augmented_dir: "aug".into(),
    };
    let csv = run_preprocess(&store, &ws, &req, &OpRegistry::builtin()).unwrap();
    assert_eq!(csv.labelmap_path, "csvrun/lm.txt");
    assert_eq!(csv.train_record.path, "csvrun/tr.rec");
    assert_eq!(csv.eval_record.path, "csvrun/ev.rec");
    assert_eq!(voc.labelmap, csv.labelmap);
    assert_eq!(
        store.get_file(&ws, "data/train.record").unwrap(),
        store.get_file(&ws, "csvrun/tr.rec").unwrap()
    );
}

#[test]
fn preprocess_reports_missing_images_and_bad_requests() {
    let (_d, store, ws) = store();
    upload_shapes(&store, &ws, 4);
    store.delete_file(&ws, "images/shape_002.png").unwrap();
    match run_preprocess(&store, &ws, &voc_request(&[]), &OpRegistry::builtin()) {
        Err(PreprocessError::Dataset(r)) => assert_eq!(r.missing_images, ["shape_002.png"]),
        other => panic!("{other:?}"),
    }
    let mut req = voc_request(&["warp"]);
    req.split_ratio = 1.0;
    match run_preprocess(&store, &ws, &req, &OpRegistry::builtin()) {
        Err(PreprocessError::Invalid(e)) => {
            let fields: Vec<_> = e.iter().map(|f| f.field.as_str()).collect();
            assert_eq!(fields, ["split_ratio", "augmentation.enabled_ops[0]"]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn train_export_and_evaluate_perfect_detector() {
    let (_d, store, ws) = store();
    upload_shapes(&store, &ws, 20);
    run_preprocess(&store, &ws, &voc_request(&["flip_h"]), &OpRegistry::builtin()).unwrap();
    let jobs = JobManager::open(Arc::clone(&store), Scheduler::with_pool_size(1).unwrap(), Arc::new(SimLauncher), JobSettings::default()).unwrap();
    let job = jobs.create_job(&ws, config(200, 50)).unwrap();
    jobs.start_job(&ws, &job.job_id).unwrap();
    let done = jobs.wait_terminal(&ws, &job.job_id, Duration::from_secs(30)).unwrap();
    assert_eq!(done.state, JobState::Succeeded);
    let steps: Vec<u64> = done.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, [0, 50, 100, 150, 200]);

    let bundle = export_bundle(&jobs, &ws, &job.job_id, 200).unwrap();
    assert_eq!(bundle.manifest.checkpoint_step, 200);
    assert_eq!(verify_bundle(&jobs, &ws, &bundle.export_id).unwrap(), bundle.manifest);
    let again = export_bundle(&jobs, &ws, &job.job_id, 200).unwrap();
    assert_eq!(again.manifest.content_hashes, bundle.manifest.content_hashes);
    assert!(matches!(export_bundle(&jobs, &ws, &job.job_id, 75), Err(ExportError::NotFound(_))));
    let tar = bundle_archive(&jobs, &ws, &bundle.export_id).unwrap();
    assert!(tar.windows(13).any(|w| w == b"manifest.json"));

    let eval = read_records(store.get_file(&ws, "data/eval.record").unwrap().as_slice()).unwrap();
    let examples: Vec<ExampleRecord> = eval.iter().map(|p| ExampleRecord::decode(p).unwrap()).collect();
    let gts = GroundTruthSet::from_examples(&examples).unwrap();
    let dets: Vec<Detection> = gts
        .to_list()
        .into_iter()
        .map(|g| Detection { image_id: g.image_id, bbox: g.bbox, class_id: g.class_id, score: 1.0 })
        .collect();
    for p in Protocol::ALL {
        let r = evaluate(&dets, &gts, p, &bundle.manifest.labelmap).unwrap();
        assert!((r.map_value - 1.0).abs() <= 1e-9);
    }
}
