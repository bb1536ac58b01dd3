//! Export bundles for trained checkpoints, and detection overlays.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use font8x8::{UnicodeFonts, BASIC_FONTS};
use serde::{Deserialize, Serialize};

use crate::augment::ImageBuffer;
use crate::config::{FieldError, ModelSpec};
use crate::ingest::{parse_labelmap_text, render_labelmap_text, LabelMap};
use crate::jobs::{JobError, JobManager};
use crate::metrics::Detection;
use crate::workspace::{sha256_hex, FileKind, WorkspaceError, WorkspaceId};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub job_id: String,
    pub model: ModelSpec,
    pub checkpoint_step: u64,
    pub labelmap: LabelMap,
    pub created_at: DateTime<Utc>,
    /// Bundle-relative path to SHA-256 hex digest, for every file except
    /// the manifest itself.
    pub content_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub export_id: String,
    /// Workspace-relative directory holding the bundle.
    pub bundle_dir: String,
    pub manifest: BundleManifest,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{0}")]
    NotFound(String),
    #[error("bundle `{bundle}` is damaged: {message}")]
    Integrity { bundle: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

pub fn export_id(job_id: &str, step: u64) -> String {
    format!("{job_id}-{step}")
}

pub fn bundle_dir(export_id: &str) -> String {
    format!("exports/{export_id}")
}

/// Copies the checkpoint, rendered config and labelmap of one job into
/// `exports/<job_id>-<step>/` and writes a manifest with their digests.
/// Re-exporting replaces the previous bundle.
pub fn export_bundle(jobs: &JobManager, ws: &WorkspaceId, job_id: &str, step: u64) -> Result<ExportBundle, ExportError> {
    let store = jobs.store();
    jobs.with_export_lock(ws, job_id, |job| {
        let ckpt = job
            .checkpoint_at(step)
            .ok_or_else(|| ExportError::NotFound(format!("job `{job_id}` has no checkpoint at step {step}")))?;
        let ckpt_name = ckpt.rel_path.rsplit('/').next().unwrap_or(&ckpt.rel_path).to_string();
        let ckpt_bytes = store.get_file(ws, &ckpt.rel_path)?;
        let config_text = jobs.rendered_config(ws, job_id)?;
        let lm_bytes = store.get_file(ws, &job.config.labelmap_path)?;
        let lm_text = String::from_utf8(lm_bytes)
            .map_err(|_| ExportError::Invalid(format!("labelmap `{}` is not UTF-8", job.config.labelmap_path)))?;
        let labelmap = parse_labelmap_text(&lm_text)
            .map_err(|e| ExportError::Invalid(format!("labelmap `{}`: {e}", job.config.labelmap_path)))?;

        let files: Vec<(String, Vec<u8>)> = vec![
            (format!("checkpoint/{ckpt_name}"), ckpt_bytes),
            ("pipeline.config".to_string(), config_text.into_bytes()),
            ("labelmap.pbtxt".to_string(), render_labelmap_text(&labelmap).into_bytes()),
        ];
        let id = export_id(job_id, step);
        let dir = bundle_dir(&id);
        match store.delete_prefix(ws, &dir) {
            Ok(_) | Err(WorkspaceError::NotFound(_)) => {}
            Err(e) => return Err(e.into()),
        }
        let mut content_hashes = BTreeMap::new();
        for (name, bytes) in &files {
            store.put_file(ws, &format!("{dir}/{name}"), bytes, Some(FileKind::Export))?;
            content_hashes.insert(name.clone(), sha256_hex(bytes));
        }
        let manifest = BundleManifest {
            job_id: job_id.to_string(),
            model: job.config.model,
            checkpoint_step: step,
            labelmap,
            created_at: store.clock().now(),
            content_hashes,
        };
        let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        store.put_file(ws, &format!("{dir}/{MANIFEST_NAME}"), &text, Some(FileKind::Export))?;
        tracing::info!(job = job_id, step, "exported bundle {dir}");
        Ok(ExportBundle {
            export_id: id,
            bundle_dir: dir,
            manifest,
        })
    })?
}

/// Re-hashes every file named in a bundle's manifest.
pub fn verify_bundle(jobs: &JobManager, ws: &WorkspaceId, export_id: &str) -> Result<BundleManifest, ExportError> {
    let store = jobs.store();
    let dir = bundle_dir(export_id);
    let raw = store.get_file(ws, &format!("{dir}/{MANIFEST_NAME}")).map_err(|e| match e {
        WorkspaceError::NotFound(_) => ExportError::NotFound(format!("export `{export_id}` not found")),
        other => other.into(),
    })?;
    let damaged = |message: String| ExportError::Integrity {
        bundle: dir.clone(),
        message,
    };
    let manifest: BundleManifest =
        serde_json::from_slice(&raw).map_err(|e| damaged(format!("unreadable manifest: {e}")))?;
    for (name, digest) in &manifest.content_hashes {
        let bytes = store
            .get_file(ws, &format!("{dir}/{name}"))
            .map_err(|e| damaged(format!("{name}: {e}")))?;
        if &sha256_hex(&bytes) != digest {
            return Err(damaged(format!("{name}: digest mismatch")));
        }
    }
    Ok(manifest)
}

/// Tar archive of a bundle directory.
pub fn bundle_archive(jobs: &JobManager, ws: &WorkspaceId, export_id: &str) -> Result<Vec<u8>, ExportError> {
    if export_id.contains('/') || export_id.is_empty() || export_id.starts_with('.') {
        return Err(ExportError::NotFound(format!("export `{export_id}` not found")));
    }
    jobs.store()
        .archive_prefix(ws, &bundle_dir(export_id))
        .map_err(|e| match e {
            WorkspaceError::NotFound(_) => ExportError::NotFound(format!("export `{export_id}` not found")),
            other => other.into(),
        })
}

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub score_threshold: f64,
    pub line_thickness: u32,
    /// Per-class colour overrides; other classes use the built-in palette.
    pub colors: BTreeMap<u32, [u8; 3]>,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            line_thickness: 2,
            colors: BTreeMap::new(),
        }
    }
}

impl RenderSpec {
    pub fn violations(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.score_threshold) {
            out.push(FieldError {
                field: "score_threshold".into(),
                message: format!("{} is outside [0, 1]", self.score_threshold),
            });
        }
        if self.line_thickness == 0 {
            out.push(FieldError {
                field: "line_thickness".into(),
                message: "must be at least 1".into(),
            });
        }
        out
    }

    pub fn color_for(&self, class_id: u32) -> [u8; 3] {
        self.colors
            .get(&class_id)
            .copied()
            .unwrap_or(PALETTE[(class_id.saturating_sub(1) as usize) % PALETTE.len()])
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

/// Where one detection is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayLayout {
    pub rect: PixelRect,
    pub caption: String,
    /// Caption background; `None` when the image is too small for it.
    pub caption_rect: Option<PixelRect>,
    pub color: [u8; 3],
}

const GLYPH: u32 = 8;
const PAD: u32 = 1;

fn denorm(v: f64, dim: u32) -> u32 {
    (v * (dim - 1) as f64).round().clamp(0.0, (dim - 1) as f64) as u32
}

/// Geometry for each detection at or above the threshold, in input order.
pub fn overlay_layout(width: u32, height: u32, dets: &[Detection], lm: &LabelMap, spec: &RenderSpec) -> Result<Vec<OverlayLayout>, Vec<FieldError>> {
    let mut errors = spec.violations();
    for (i, d) in dets.iter().enumerate() {
        if lm.name_of(d.class_id).is_none() {
            errors.push(FieldError {
                field: format!("detections[{i}].class_id"),
                message: format!("class id {} is not in the labelmap", d.class_id),
            });
        }
        let b = d.bbox;
        if !(b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] <= b[2] && b[1] <= b[3]) {
            errors.push(FieldError {
                field: format!("detections[{i}].box"),
                message: format!("box {b:?} is not a normalized [xmin, ymin, xmax, ymax]"),
            });
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    if width == 0 || height == 0 {
        return Ok(Vec::new());
    }
    Ok(dets
        .iter()
        .filter(|d| d.score >= spec.score_threshold)
        .map(|d| {
            let rect = PixelRect {
                x0: denorm(d.bbox[0], width),
                y0: denorm(d.bbox[1], height),
                x1: denorm(d.bbox[2], width),
                y1: denorm(d.bbox[3], height),
            };
            let caption = format!("{}: {:.2}", lm.name_of(d.class_id).unwrap_or_default(), d.score);
            let cw = caption.chars().count() as u32 * GLYPH + 2 * PAD;
            let ch = GLYPH + 2 * PAD;
            let caption_rect = (cw <= width && ch <= height).then(|| {
                let x = rect.x0.min(width - cw);
                let y = rect.y0.saturating_sub(ch).min(height - ch);
                PixelRect {
                    x0: x,
                    y0: y,
                    x1: x + cw - 1,
                    y1: y + ch - 1,
                }
            });
            OverlayLayout {
                rect,
                caption,
                caption_rect,
                color: spec.color_for(d.class_id),
            }
        })
        .collect())
}

/// Draws boxes and captions; the output has the input's dimensions.
pub fn render_detections(img: &ImageBuffer, dets: &[Detection], lm: &LabelMap, spec: &RenderSpec) -> Result<ImageBuffer, Vec<FieldError>> {
    let layout = overlay_layout(img.width(), img.height(), dets, lm, spec)?;
    let mut out = img.clone();
    for item in &layout {
        draw_outline(&mut out, item.rect, spec.line_thickness, item.color);
        if let Some(cap) = item.caption_rect {
            draw_caption(&mut out, cap, &item.caption, item.color);
        }
    }
    Ok(out)
}

fn draw_outline(img: &mut ImageBuffer, r: PixelRect, thickness: u32, color: [u8; 3]) {
    let t = thickness.saturating_sub(1);
    for y in r.y0..=r.y1 {
        for x in r.x0..=r.x1 {
            let edge = x <= r.x0 + t || x + t >= r.x1 || y <= r.y0 + t || y + t >= r.y1;
            if edge {
                img.set(x, y, color);
            }
        }
    }
}

fn draw_caption(img: &mut ImageBuffer, r: PixelRect, text: &str, color: [u8; 3]) {
    let luma = 299 * color[0] as u32 + 587 * color[1] as u32 + 114 * color[2] as u32;
    let ink = if luma > 128_000 { [0, 0, 0] } else { [255, 255, 255] };
    for y in r.y0..=r.y1 {
        for x in r.x0..=r.x1 {
            img.set(x, y, color);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
        let gx = r.x0 + PAD + i as u32 * GLYPH;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    img.set(gx + col, r.y0 + PAD + row as u32, ink);
                }
            }
        }
    }
}
