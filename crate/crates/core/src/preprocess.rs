//! Annotation files in a workspace to labelmap, train/eval record files
//! and augmented images.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_plan, AugmentError, AugmentationPlan, ImageBuffer, OpRegistry};
use crate::config::FieldError;
use crate::ingest::{
    build_labelmap, parse_annotation_csv, parse_voc_xml, render_labelmap_text, split_dataset, validate_dataset,
    AnnotatedImage, IngestError, LabelMap, ValidationReport,
};
use crate::records::{encode_detection_example, write_records, RecordError, RecordFileStats};
use crate::workspace::{normalize_rel_path, FileKind, WorkspaceError, WorkspaceId, WorkspaceStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    VocXml,
    Csv,
}

impl AnnotationFormat {
    fn extension(self) -> &'static str {
        match self {
            Self::VocXml => ".xml",
            Self::Csv => ".csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputNames {
    pub output_dir: String,
    pub labelmap: String,
    pub train_record: String,
    pub eval_record: String,
    /// Subdirectory of `output_dir` for augmented PNGs.
    pub augmented_dir: String,
}

impl Default for OutputNames {
    fn default() -> Self {
        Self {
            output_dir: "data".into(),
            labelmap: "labelmap.pbtxt".into(),
            train_record: "train.record".into(),
            eval_record: "eval.record".into(),
            augmented_dir: "augmented".into(),
        }
    }
}

fn default_ratio() -> f64 {
    0.8
}

fn default_images_dir() -> String {
    "images".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessRequest {
    pub format: AnnotationFormat,
    /// Workspace paths. Each is a single annotation file, or a directory
    /// whose files with the format's extension are all read.
    pub annotations: Vec<String>,
    /// Where the annotated image files live.
    #[serde(default = "default_images_dir")]
    pub images_dir: String,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augmentation: AugmentationPlan,
    #[serde(default)]
    pub outputs: OutputNames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub path: String,
    pub record_count: u64,
    pub total_payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessResult {
    pub labelmap_path: String,
    pub labelmap: LabelMap,
    pub train_record: RecordSummary,
    pub eval_record: RecordSummary,
    pub train_images: usize,
    pub eval_images: usize,
    pub augmented_images: Vec<String>,
    pub validation: ValidationReport,
}

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("invalid preprocess request: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("dataset validation failed")]
    Dataset(ValidationReport),
    #[error("{path}: {source}")]
    Ingest { path: String, source: IngestError },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

fn field(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.to_string(),
        message: message.into(),
    }
}

fn join(dir: &str, name: &str) -> String {
    if dir.is_empty() {
        name.to_string()
    } else {
        format!("{}/{name}", dir.trim_end_matches('/'))
    }
}

fn check_request(req: &PreprocessRequest, registry: &OpRegistry) -> Vec<FieldError> {
    let mut errors = Vec::new();
    if req.annotations.is_empty() {
        errors.push(field("annotations", "at least one annotation path is required"));
    }
    for (i, p) in req.annotations.iter().enumerate() {
        if let Err(e) = normalize_rel_path(p) {
            errors.push(field(&format!("annotations[{i}]"), e.to_string()));
        }
    }
    if !req.images_dir.is_empty() {
        if let Err(e) = normalize_rel_path(&req.images_dir) {
            errors.push(field("images_dir", e.to_string()));
        }
    }
    if !(req.split_ratio > 0.0 && req.split_ratio < 1.0) {
        errors.push(field("split_ratio", format!("{} outside (0, 1)", req.split_ratio)));
    }
    for (f, m) in req.augmentation.violations(registry) {
        errors.push(field(&format!("augmentation.{f}"), m));
    }
    let o = &req.outputs;
    for (name, value) in [
        ("outputs.labelmap", &o.labelmap),
        ("outputs.train_record", &o.train_record),
        ("outputs.eval_record", &o.eval_record),
        ("outputs.augmented_dir", &o.augmented_dir),
    ] {
        if let Err(e) = normalize_rel_path(&join(&o.output_dir, value)) {
            errors.push(field(name, e.to_string()));
        }
    }
    let mut names = [&o.labelmap, &o.train_record, &o.eval_record, &o.augmented_dir];
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        errors.push(field("outputs", "output names must be distinct"));
    }
    errors
}

/// Annotation files named by the request, in a stable order.
fn annotation_files(store: &WorkspaceStore, ws: &WorkspaceId, req: &PreprocessRequest) -> Result<Vec<String>, PreprocessError> {
    let mut out = Vec::new();
    for (i, p) in req.annotations.iter().enumerate() {
        let p = normalize_rel_path(p)?;
        if store.exists(ws, &p) {
            out.push(p);
            continue;
        }
        let ext = req.format.extension();
        let mut found: Vec<String> = store
            .list_files(ws, Some(&format!("{p}/")))?
            .into_iter()
            .map(|f| f.rel_path)
            .filter(|f| f.to_ascii_lowercase().ends_with(ext))
            .collect();
        if found.is_empty() {
            return Err(PreprocessError::Invalid(vec![field(
                &format!("annotations[{i}]"),
                format!("no {ext} annotation files at `{p}`"),
            )]));
        }
        found.sort();
        out.append(&mut found);
    }
    out.dedup();
    Ok(out)
}

fn image_format(name: &str, bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Png) => "png",
        Ok(image::ImageFormat::Jpeg) => "jpeg",
        _ if name.to_ascii_lowercase().ends_with(".png") => "png",
        _ => "jpeg",
    }
}

fn write_record_file(
    store: &WorkspaceStore,
    ws: &WorkspaceId,
    path: &str,
    payloads: &[Vec<u8>],
) -> Result<RecordSummary, PreprocessError> {
    let mut buf = Vec::new();
    let RecordFileStats {
        record_count,
        total_payload_bytes,
    } = write_records(&mut buf, payloads)?;
    store.put_file(ws, path, &buf, Some(FileKind::Record))?;
    Ok(RecordSummary {
        path: path.to_string(),
        record_count,
        total_payload_bytes,
    })
}

pub fn run_preprocess(
    store: &WorkspaceStore,
    ws: &WorkspaceId,
    req: &PreprocessRequest,
    registry: &OpRegistry,
) -> Result<PreprocessResult, PreprocessError> {
    let errors = check_request(req, registry);
    if !errors.is_empty() {
        return Err(PreprocessError::Invalid(errors));
    }

    let mut images: Vec<AnnotatedImage> = Vec::new();
    for path in annotation_files(store, ws, req)? {
        let bytes = store.get_file(ws, &path)?;
        let parsed = match req.format {
            AnnotationFormat::VocXml => parse_voc_xml(&bytes).map(|img| vec![img]),
            AnnotationFormat::Csv => parse_annotation_csv(&bytes),
        };
        images.extend(parsed.map_err(|source| PreprocessError::Ingest { path, source })?);
    }

    let image_path = |name: &str| join(&req.images_dir, name);
    let report = validate_dataset(&images, |name| store.exists(ws, &image_path(name)));
    if report.has_errors() {
        return Err(PreprocessError::Dataset(report));
    }
    let labelmap = build_labelmap(&images).map_err(|source| PreprocessError::Ingest {
        path: "annotations".into(),
        source,
    })?;
    let split = split_dataset(&images, req.split_ratio, req.seed).map_err(|source| PreprocessError::Ingest {
        path: "annotations".into(),
        source,
    })?;
    let samples = apply_plan(&split, &req.augmentation, registry, |name| {
        let bytes = store.get_file(ws, &image_path(name)).map_err(|e| e.to_string())?;
        ImageBuffer::decode(&bytes).map_err(|e| e.to_string())
    })?;

    let out = &req.outputs;
    let aug_dir = join(&out.output_dir, &out.augmented_dir);
    let mut augmented_images = Vec::new();
    let mut train_payloads = Vec::with_capacity(samples.len());
    for sample in &samples {
        let payload = match &sample.pixels {
            Some(pixels) => {
                let png = pixels.encode_png();
                let path = join(&aug_dir, &sample.image.filename);
                store.put_file(ws, &path, &png, Some(FileKind::Image))?;
                augmented_images.push(path);
                encode_detection_example(&sample.image, &png, "png", &labelmap)?
            }
            None => {
                let bytes = store.get_file(ws, &image_path(&sample.image.filename))?;
                encode_detection_example(&sample.image, &bytes, image_format(&sample.image.filename, &bytes), &labelmap)?
            }
        };
        train_payloads.push(payload);
    }
    let mut eval_payloads = Vec::with_capacity(split.eval.len());
    for img in &split.eval {
        let bytes = store.get_file(ws, &image_path(&img.filename))?;
        eval_payloads.push(encode_detection_example(img, &bytes, image_format(&img.filename, &bytes), &labelmap)?);
    }

    let labelmap_path = join(&out.output_dir, &out.labelmap);
    store.put_file(ws, &labelmap_path, render_labelmap_text(&labelmap).as_bytes(), Some(FileKind::Labelmap))?;
    let train_record = write_record_file(store, ws, &join(&out.output_dir, &out.train_record), &train_payloads)?;
    let eval_record = write_record_file(store, ws, &join(&out.output_dir, &out.eval_record), &eval_payloads)?;
    tracing::info!(
        train = train_record.record_count,
        eval = eval_record.record_count,
        "preprocessed {} images",
        images.len()
    );
    Ok(PreprocessResult {
        labelmap_path,
        labelmap,
        train_record,
        eval_record,
        train_images: split.train.len(),
        eval_images: split.eval.len(),
        augmented_images,
        validation: report,
    })
}
