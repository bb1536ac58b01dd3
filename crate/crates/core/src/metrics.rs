//! Detection evaluation: IoU, greedy matching, PR curves, AP and mAP.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::FieldError;
use crate::ingest::LabelMap;
use crate::records::ExampleRecord;

/// Normalized `[xmin, ymin, xmax, ymax]`.
pub type NormRect = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: NormRect,
    pub class_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: NormRect,
    pub class_id: u32,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid evaluation input: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("{0}")]
    Parse(String),
}

impl MetricsError {
    fn one(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }
}

/// Ground truth boxes keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub images: BTreeMap<String, Vec<(NormRect, u32)>>,
}

impl GroundTruthSet {
    pub fn push(&mut self, image_id: &str, bbox: NormRect, class_id: u32) {
        self.images.entry(image_id.to_string()).or_default().push((bbox, class_id));
    }

    pub fn from_list(list: &[GroundTruth]) -> Self {
        let mut set = Self::default();
        for g in list {
            set.push(&g.image_id, g.bbox, g.class_id);
        }
        set
    }

    pub fn to_list(&self) -> Vec<GroundTruth> {
        self.images
            .iter()
            .flat_map(|(id, boxes)| {
                boxes.iter().map(move |&(bbox, class_id)| GroundTruth {
                    image_id: id.clone(),
                    bbox,
                    class_id,
                })
            })
            .collect()
    }

    /// Reads boxes from detection Examples; the image id is the filename.
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a ExampleRecord>) -> Result<Self, MetricsError> {
        let mut set = Self::default();
        for (n, ex) in examples.into_iter().enumerate() {
            let bad = |m: &str| MetricsError::Parse(format!("record {n}: {m}"));
            let name = ex
                .bytes("image/filename")
                .and_then(|v| v.first())
                .ok_or_else(|| bad("missing image/filename"))?;
            let name = String::from_utf8(name.clone()).map_err(|_| bad("image/filename is not UTF-8"))?;
            let coords: Vec<&[f32]> = ["xmin", "ymin", "xmax", "ymax"]
                .iter()
                .map(|k| ex.floats(&format!("image/object/bbox/{k}")).unwrap_or(&[]))
                .collect();
            let labels = ex.ints("image/object/class/label").unwrap_or(&[]);
            if coords.iter().any(|c| c.len() != labels.len()) {
                return Err(bad("box coordinate and label lists differ in length"));
            }
            set.images.entry(name.clone()).or_default();
            for (i, &label) in labels.iter().enumerate() {
                let id = u32::try_from(label).map_err(|_| bad("negative class label"))?;
                let bbox = [coords[0][i] as f64, coords[1][i] as f64, coords[2][i] as f64, coords[3][i] as f64];
                set.push(&name, bbox, id);
            }
        }
        Ok(set)
    }

    pub fn num_boxes(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }
}

pub fn parse_detections(bytes: &[u8]) -> Result<Vec<Detection>, MetricsError> {
    serde_json::from_slice(bytes).map_err(|e| MetricsError::Parse(format!("detections file: {e}")))
}

pub fn parse_ground_truth(bytes: &[u8]) -> Result<GroundTruthSet, MetricsError> {
    let list: Vec<GroundTruth> =
        serde_json::from_slice(bytes).map_err(|e| MetricsError::Parse(format!("ground truth file: {e}")))?;
    Ok(GroundTruthSet::from_list(&list))
}

pub fn iou(a: &NormRect, b: &NormRect) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The unmatched ground truth with the highest IoU at or above `thr`;
/// equal IoUs go to the lower index.
fn best_unmatched(det: &NormRect, gts: &[NormRect], used: &[bool], thr: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        if used[i] {
            continue;
        }
        let v = iou(det, g);
        if v >= thr && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// TP/FP flag per detection; `dets` must already be in descending score
/// order.
pub fn match_detections(dets: &[NormRect], gts: &[NormRect], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| match best_unmatched(d, gts, &used, thr) {
            Some(i) => {
                used[i] = true;
                true
            }
            None => false,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection.
    pub points: Vec<(f64, f64)>,
    pub num_gt: usize,
}

pub fn pr_curve(flags: &[bool], num_gt: usize) -> PrCurve {
    if num_gt == 0 {
        return PrCurve { points: Vec::new(), num_gt };
    }
    let mut tp = 0usize;
    let points = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    PrCurve { points, num_gt }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    AllPoint,
    ElevenPoint,
}

pub fn average_precision(pr: &PrCurve, mode: Interpolation) -> f64 {
    if pr.points.is_empty() {
        return 0.0;
    }
    match mode {
        Interpolation::AllPoint => {
            let mut envelope = vec![0.0; pr.points.len()];
            let mut running = 0.0f64;
            for (i, &(_, p)) in pr.points.iter().enumerate().rev() {
                running = running.max(p);
                envelope[i] = running;
            }
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (&(r, _), &p) in pr.points.iter().zip(&envelope) {
                area += (r - prev_recall) * p;
                prev_recall = r;
            }
            area
        }
        Interpolation::ElevenPoint => {
            let total: f64 = (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    pr.points
                        .iter()
                        .filter(|&&(rec, _)| rec >= r)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum();
            total / 11.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "VOC50_11pt")]
    Voc50ElevenPoint,
    #[serde(rename = "VOC50_allpt")]
    Voc50AllPoint,
    #[serde(rename = "COCO_50_95")]
    Coco50To95,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Self::Voc50ElevenPoint, Self::Voc50AllPoint, Self::Coco50To95];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Voc50ElevenPoint => "VOC50_11pt",
            Self::Voc50AllPoint => "VOC50_allpt",
            Self::Coco50To95 => "COCO_50_95",
        }
    }

    pub fn iou_thresholds(self) -> Vec<f64> {
        match self {
            Self::Voc50ElevenPoint | Self::Voc50AllPoint => vec![0.5],
            Self::Coco50To95 => (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }

    pub fn interpolation(self) -> Interpolation {
        match self {
            Self::Voc50ElevenPoint => Interpolation::ElevenPoint,
            _ => Interpolation::AllPoint,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown protocol `{s}`; expected one of VOC50_11pt, VOC50_allpt, COCO_50_95"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub name: String,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub interpolation: Interpolation,
    pub iou_thresholds: Vec<f64>,
    pub per_class_ap: BTreeMap<u32, f64>,
    #[serde(rename = "mAP")]
    pub map_value: f64,
    pub classes: BTreeMap<u32, ClassResult>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mode = match self.interpolation {
            Interpolation::AllPoint => "all-point",
            Interpolation::ElevenPoint => "11-point",
        };
        let thr = match self.iou_thresholds.as_slice() {
            [one] => format!("{one:.2}"),
            [first, .., last] => format!("{first:.2}:{last:.2}"),
            [] => String::new(),
        };
        let width = self.classes.values().map(|c| c.name.len()).max().unwrap_or(0).max(5);
        let mut out = format!("protocol {} ({mode} interpolation, IoU {thr})\n", self.protocol);
        let _ = writeln!(out, "{:>4}  {:<width$}  {:>6}  {:>6}  {:>8}", "id", "class", "gt", "dets", "AP");
        for (id, ap) in &self.per_class_ap {
            let c = &self.classes[id];
            let _ = writeln!(out, "{id:>4}  {:<width$}  {:>6}  {:>6}  {ap:>8.4}", c.name, c.num_gt, c.num_detections);
        }
        let _ = writeln!(out, "{:>4}  {:<width$}  {:>6}  {:>6}  {:>8.4}", "", "mAP", "", "", self.map_value);
        out
    }
}

fn check_rect(field: &str, b: &NormRect, errors: &mut Vec<FieldError>) {
    let in_range = b.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
    if !in_range || !(b[0] < b[2] && b[1] < b[3]) {
        errors.push(FieldError {
            field: field.to_string(),
            message: format!("box {b:?} must satisfy 0 <= xmin < xmax <= 1 and 0 <= ymin < ymax <= 1"),
        });
    }
}

fn check_inputs(dets: &[Detection], gts: &GroundTruthSet, lm: &LabelMap) -> Vec<FieldError> {
    let mut errors = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if !lm.contains_id(d.class_id) {
            errors.push(FieldError {
                field: format!("detections[{i}].class_id"),
                message: format!("class id {} is not in the labelmap", d.class_id),
            });
        }
        check_rect(&format!("detections[{i}].box"), &d.bbox, &mut errors);
        if !(0.0..=1.0).contains(&d.score) {
            errors.push(FieldError {
                field: format!("detections[{i}].score"),
                message: format!("score {} is outside [0, 1]", d.score),
            });
        }
    }
    for (image, boxes) in &gts.images {
        for (j, (b, class)) in boxes.iter().enumerate() {
            if !lm.contains_id(*class) {
                errors.push(FieldError {
                    field: format!("ground_truth[{image}][{j}].class_id"),
                    message: format!("class id {class} is not in the labelmap"),
                });
            }
            check_rect(&format!("ground_truth[{image}][{j}].box"), b, &mut errors);
        }
    }
    errors
}

/// Per-class AP over all images at one IoU threshold. `dets` holds
/// indices into `all` already sorted by descending score.
fn class_ap(all: &[Detection], dets: &[usize], gts: &BTreeMap<&str, Vec<NormRect>>, num_gt: usize, thr: f64, mode: Interpolation) -> f64 {
    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let flags: Vec<bool> = dets
        .iter()
        .map(|&i| {
            let d = &all[i];
            let (Some(boxes), Some(used)) = (gts.get(d.image_id.as_str()), used.get_mut(d.image_id.as_str())) else {
                return false;
            };
            match best_unmatched(&d.bbox, boxes, used, thr) {
                Some(j) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    average_precision(&pr_curve(&flags, num_gt), mode)
}

pub fn evaluate(dets: &[Detection], gts: &GroundTruthSet, protocol: Protocol, lm: &LabelMap) -> Result<MetricsReport, MetricsError> {
    let errors = check_inputs(dets, gts, lm);
    if !errors.is_empty() {
        return Err(MetricsError::Invalid(errors));
    }
    if gts.num_boxes() == 0 {
        return Err(MetricsError::one("ground_truth", "no ground-truth boxes; mAP is undefined"));
    }

    // class -> image -> boxes
    let mut gt_by_class: BTreeMap<u32, BTreeMap<&str, Vec<NormRect>>> = BTreeMap::new();
    for (image, boxes) in &gts.images {
        for (b, class) in boxes {
            gt_by_class.entry(*class).or_default().entry(image.as_str()).or_default().push(*b);
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut dets_by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in order {
        dets_by_class.entry(dets[i].class_id).or_default().push(i);
    }

    let thresholds = protocol.iou_thresholds();
    let mode = protocol.interpolation();
    let mut per_class_ap = BTreeMap::new();
    let mut classes = BTreeMap::new();
    for (&class, gt) in &gt_by_class {
        let num_gt: usize = gt.values().map(Vec::len).sum();
        let class_dets = dets_by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let ap = thresholds
            .iter()
            .map(|&t| class_ap(dets, class_dets, gt, num_gt, t, mode))
            .sum::<f64>()
            / thresholds.len() as f64;
        per_class_ap.insert(class, ap);
        classes.insert(
            class,
            ClassResult {
                name: lm.name_of(class).unwrap_or_default().to_string(),
                num_gt,
                num_detections: class_dets.len(),
            },
        );
    }
    let map_value = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(MetricsReport {
        protocol,
        interpolation: mode,
        iou_thresholds: thresholds,
        per_class_ap,
        map_value,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm2() -> LabelMap {
        LabelMap::from_names(["a", "b"]).unwrap()
    }

    fn det(image: &str, bbox: NormRect, class_id: u32, score: f64) -> Detection {
        Detection { image_id: image.into(), bbox, class_id, score }
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[20.0, 20.0, 30.0, 30.0]), 0.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 15.0, 15.0]), 25.0 / 175.0);
        assert_eq!(iou(&a, &[10.0, 0.0, 20.0, 10.0]), 0.0);
    }

    #[test]
    fn matching_examples() {
        let g = [0.0, 0.0, 1.0, 1.0];
        let seventy = [0.0, 0.0, 0.7, 1.0];
        assert_eq!(match_detections(&[seventy], &[g], 0.5), [true]);
        assert_eq!(match_detections(&[seventy, g], &[g], 0.5), [true, false]);
        assert_eq!(match_detections(&[[0.0, 0.0, 0.4, 1.0]], &[g], 0.5), [false]);
    }

    #[test]
    fn matching_skips_taken_ground_truth() {
        // second det overlaps gt0 best, but gt0 is taken, so it falls back to gt1
        let gts = [[0.0, 0.0, 0.5, 1.0], [0.4, 0.0, 1.0, 1.0]];
        let dets = [[0.0, 0.0, 0.5, 1.0], [0.1, 0.0, 0.6, 1.0]];
        assert!((iou(&dets[1], &gts[1]) - 0.2 / 0.9).abs() < 1e-12);
        assert_eq!(match_detections(&dets, &gts, 0.2), [true, true]);
        assert_eq!(match_detections(&dets, &gts, 0.5), [true, false]);
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_curve(&[true], 1).points, [(1.0, 1.0)]);
        assert_eq!(pr_curve(&[false, true], 1).points, [(0.0, 0.0), (1.0, 0.5)]);
        assert!(pr_curve(&[], 3).points.is_empty());
        assert!(pr_curve(&[true], 0).points.is_empty());
    }

    #[test]
    fn ap_examples() {
        for mode in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            assert_eq!(average_precision(&pr_curve(&[true], 1), mode), 1.0);
            assert_eq!(average_precision(&pr_curve(&[false, true], 1), mode), 0.5);
            assert_eq!(average_precision(&pr_curve(&[], 2), mode), 0.0);
        }
        // recall 0.5 at precision 1, then 1.0 at 2/3
        let pr = pr_curve(&[true, false, true], 2);
        assert_eq!(average_precision(&pr, Interpolation::AllPoint), 0.5 + 0.5 * (2.0 / 3.0));
        let expected = (6.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        assert!((average_precision(&pr, Interpolation::ElevenPoint) - expected).abs() < 1e-15);
    }

    #[test]
    fn perfect_detector_all_protocols() {
        let mut gts = GroundTruthSet::default();
        gts.push("x", [0.1, 0.1, 0.4, 0.5], 1);
        gts.push("x", [0.5, 0.2, 0.9, 0.8], 2);
        gts.push("y", [0.3, 0.3, 0.6, 0.6], 1);
        let dets: Vec<Detection> = gts.to_list().into_iter().map(|g| det(&g.image_id, g.bbox, g.class_id, 1.0)).collect();
        for p in Protocol::ALL {
            let r = evaluate(&dets, &gts, p, &lm2()).unwrap();
            assert_eq!(r.map_value, 1.0, "{p}");
        }
    }

    #[test]
    fn map_is_mean_over_classes_with_ground_truth() {
        let lm = LabelMap::from_names(["a", "b", "c"]).unwrap();
        let mut gts = GroundTruthSet::default();
        let g = [0.0, 0.0, 0.5, 0.5];
        gts.push("i", g, 1);
        gts.push("i", g, 2);
        let dets = vec![
            det("i", g, 1, 0.9),
            det("i", [0.6, 0.6, 0.9, 0.9], 2, 0.9),
            det("i", g, 2, 0.8),
            det("i", g, 3, 0.7),
        ];
        let r = evaluate(&dets, &gts, Protocol::Voc50AllPoint, &lm).unwrap();
        assert_eq!(r.per_class_ap, BTreeMap::from([(1, 1.0), (2, 0.5)]));
        assert_eq!(r.map_value, 0.75);
        assert!(r.to_table().contains("0.7500"));
    }

    #[test]
    fn rejects_unknown_class_and_bad_boxes() {
        let mut gts = GroundTruthSet::default();
        gts.push("i", [0.0, 0.0, 0.5, 0.5], 1);
        let err = evaluate(&[det("i", [0.0, 0.0, 0.5, 0.5], 7, 0.5)], &gts, Protocol::Voc50AllPoint, &lm2()).unwrap_err();
        assert!(matches!(&err, MetricsError::Invalid(e) if e[0].field == "detections[0].class_id"));
        let err = evaluate(&[det("i", [0.5, 0.0, 0.5, 0.5], 1, 1.5)], &gts, Protocol::Voc50AllPoint, &lm2()).unwrap_err();
        assert!(matches!(&err, MetricsError::Invalid(e) if e.len() == 2));
        assert!(evaluate(&[], &GroundTruthSet::default(), Protocol::Voc50AllPoint, &lm2()).is_err());
    }

    #[test]
    fn json_shapes() {
        let d: Vec<Detection> = serde_json::from_str(r#"[{"image_id":"a.png","box":[0.1,0.2,0.3,0.4],"class_id":1,"score":0.5}]"#).unwrap();
        assert_eq!(d[0].bbox, [0.1, 0.2, 0.3, 0.4]);
        let mut gts = GroundTruthSet::default();
        gts.push("a.png", [0.1, 0.2, 0.3, 0.4], 1);
        let r = evaluate(&d, &gts, Protocol::Coco50To95, &lm2()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["protocol"], "COCO_50_95");
        assert_eq!(v["mAP"], 1.0);
        assert_eq!(v["per_class_ap"]["1"], 1.0);
        assert_eq!(v["iou_thresholds"].as_array().unwrap().len(), 10);
        assert_eq!(v["iou_thresholds"][1], 0.55);
    }

    #[test]
    fn ground_truth_from_examples() {
        use crate::ingest::{AnnotatedImage, BoundingBox};
        let img = AnnotatedImage {
            filename: "p.png".into(),
            width: 100,
            height: 50,
            boxes: vec![BoundingBox { xmin: 10.0, ymin: 5.0, xmax: 60.0, ymax: 25.0, class_name: "b".into() }],
        };
        let ex = crate::records::detection_example(&img, b"x", "png", &lm2()).unwrap();
        let set = GroundTruthSet::from_examples([&ex]).unwrap();
        assert_eq!(set.images["p.png"], vec![([0.1f32 as f64, 0.1f32 as f64, 0.6f32 as f64, 0.5], 2)]);
    }

    fn arb_rect() -> impl Strategy<Value = NormRect> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..0.6f64, 0.01..0.6f64)
            .prop_map(|(x, y, w, h)| [x, y, (x + w).min(1.0), (y + h).min(1.0)])
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Detection>, GroundTruthSet)> {
        let gts = prop::collection::vec((0..3usize, arb_rect(), 1..=2u32), 1..8);
        let dets = prop::collection::vec((0..3usize, arb_rect(), 1..=2u32, 0.0..=1.0f64), 0..8);
        (gts, dets).prop_map(|(g, d)| {
            let mut set = GroundTruthSet::default();
            for (img, b, c) in g {
                set.push(&format!("im{img}"), b, c);
            }
            let dets = d.into_iter().map(|(img, b, c, s)| det(&format!("im{img}"), b, c, s)).collect();
            (dets, set)
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_rect(), b in arb_rect()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn monotone_score_relabeling_changes_nothing((dets, gts) in arb_instance()) {
            let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * 0.5, ..d.clone() }).collect();
            for p in Protocol::ALL {
                prop_assert_eq!(evaluate(&dets, &gts, p, &lm2()).unwrap(), evaluate(&squashed, &gts, p, &lm2()).unwrap());
            }
        }

        #[test]
        fn ap_bounds_and_tail_additions(flags in prop::collection::vec(any::<bool>(), 0..12), extra in 0usize..4) {
            let num_gt = flags.iter().filter(|f| **f).count() + extra;
            prop_assume!(num_gt > 0);
            for mode in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
                let ap = average_precision(&pr_curve(&flags, num_gt), mode);
                prop_assert!((0.0..=1.0).contains(&ap));
                let mut fp = flags.clone();
                fp.push(false);
                prop_assert!(average_precision(&pr_curve(&fp, num_gt), mode) <= ap);
            }
            if extra > 0 {
                let mut tp = flags.clone();
                tp.push(true);
                let before = average_precision(&pr_curve(&flags, num_gt), Interpolation::AllPoint);
                prop_assert!(average_precision(&pr_curve(&tp, num_gt), Interpolation::AllPoint) >= before);
            }
        }

        #[test]
        fn coco_never_exceeds_voc_allpoint((dets, gts) in arb_instance()) {
            let coco = evaluate(&dets, &gts, Protocol::Coco50To95, &lm2()).unwrap();
            let voc = evaluate(&dets, &gts, Protocol::Voc50AllPoint, &lm2()).unwrap();
            prop_assert!(coco.map_value <= voc.map_value + 1e-12);
        }
    }
}
