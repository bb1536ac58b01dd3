//! Seeded image augmentation with box co-transforms.
//!
//! Operations are registered by name in an [`OpRegistry`]; an
//! [`AugmentationPlan`] selects a subset by name and the fraction of the
//! training split that receives one augmented copy per enabled op.

mod image;
mod ops;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::image::{ImageBuffer, NormBox, UnitCoord};
pub use ops::{
    adjust_brightness, adjust_contrast, adjust_saturation, flip_horizontal, rotate_90_cw, AugmentOp, Brightness,
    Contrast, FlipHorizontal, Rotate90Cw, Saturation,
};

use crate::ingest::{AnnotatedImage, BoundingBox, DatasetSplit};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("image error: {0}")]
    Image(String),
    #[error("cannot load `{filename}`: {message}")]
    Load { filename: String, message: String },
    #[error("invalid augmentation plan: {0}")]
    Plan(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPlan {
    pub enabled_ops: Vec<String>,
    pub fraction: f64,
    pub seed: u64,
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub saturation_factor: f64,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self {
            enabled_ops: Vec::new(),
            fraction: 0.5,
            seed: 0,
            brightness_delta: 0.2,
            contrast_factor: 1.5,
            saturation_factor: 1.5,
        }
    }
}

impl AugmentationPlan {
    /// Every range violation, as `(field, message)` pairs.
    pub fn violations(&self, registry: &OpRegistry) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, name) in self.enabled_ops.iter().enumerate() {
            if !registry.contains(name) {
                out.push((format!("enabled_ops[{i}]"), format!("unknown op `{name}`")));
            } else if !seen.insert(name) {
                out.push((format!("enabled_ops[{i}]"), format!("duplicate op `{name}`")));
            }
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            out.push(("fraction".into(), format!("{} outside [0, 1]", self.fraction)));
        }
        if !(-1.0..=1.0).contains(&self.brightness_delta) {
            out.push(("brightness_delta".into(), format!("{} outside [-1, 1]", self.brightness_delta)));
        }
        if !(self.contrast_factor > 0.0 && self.contrast_factor.is_finite()) {
            out.push(("contrast_factor".into(), format!("{} must be > 0", self.contrast_factor)));
        }
        if !(self.saturation_factor >= 0.0 && self.saturation_factor.is_finite()) {
            out.push(("saturation_factor".into(), format!("{} must be >= 0", self.saturation_factor)));
        }
        out
    }
}

type OpFactory = fn(&AugmentationPlan) -> Box<dyn AugmentOp>;

/// Augmentation ops by name.
pub struct OpRegistry {
    factories: BTreeMap<&'static str, OpFactory>,
}

impl std::fmt::Debug for OpRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for OpRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl OpRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("flip_h", |_| Box::new(FlipHorizontal));
        r.register("rotate90", |_| Box::new(Rotate90Cw));
        r.register("brightness", |p| Box::new(Brightness { delta: p.brightness_delta }));
        r.register("contrast", |p| Box::new(Contrast { factor: p.contrast_factor }));
        r.register("saturation", |p| Box::new(Saturation { factor: p.saturation_factor }));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: OpFactory) {
        self.factories.insert(name, factory);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, name: &str, plan: &AugmentationPlan) -> Option<Box<dyn AugmentOp>> {
        self.factories.get(name).map(|f| f(plan))
    }
}

/// A training sample after augmentation. Augmented samples carry their
/// decoded pixels; originals are still referenced by filename only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: AnnotatedImage,
    pub pixels: Option<ImageBuffer>,
}

/// `stem_suffix.png`
pub fn augmented_filename(filename: &str, suffix: &str) -> String {
    let stem = match filename.rsplit_once('.') {
        Some((stem, _)) if !stem.is_empty() => stem,
        _ => filename,
    };
    format!("{stem}{suffix}.png")
}

fn to_unit(v: f64, extent: u32) -> f64 {
    (v / extent as f64).clamp(0.0, 1.0)
}

/// Back to pixels; products within 1e-6 of a whole pixel snap to it so
/// that later truncation does not lose a pixel to float noise.
fn to_pixels(v: f64, extent: u32) -> f64 {
    let p = v * extent as f64;
    let r = p.round();
    if (p - r).abs() < 1e-6 {
        r
    } else {
        p
    }
}

pub fn normalize_boxes(img: &AnnotatedImage) -> Vec<NormBox> {
    img.boxes
        .iter()
        .map(|b| {
            NormBox::new(
                [
                    to_unit(b.xmin, img.width),
                    to_unit(b.ymin, img.height),
                    to_unit(b.xmax, img.width),
                    to_unit(b.ymax, img.height),
                ],
                b.class_name.clone(),
            )
        })
        .collect()
}

/// Number of train images that receive augmented copies.
pub fn selection_count(train_len: usize, fraction: f64) -> usize {
    (fraction * train_len as f64).floor() as usize
}

/// Appends one augmented copy per enabled op for a seeded selection of
/// `floor(fraction * |train|)` training images. Originals come first, in
/// order; the eval split is never touched.
pub fn apply_plan<F>(
    split: &DatasetSplit,
    plan: &AugmentationPlan,
    registry: &OpRegistry,
    mut load: F,
) -> Result<Vec<TrainSample>, AugmentError>
where
    F: FnMut(&str) -> Result<ImageBuffer, String>,
{
    let violations = plan.violations(registry);
    if !violations.is_empty() {
        let text: Vec<_> = violations.iter().map(|(f, m)| format!("{f}: {m}")).collect();
        return Err(AugmentError::Plan(text.join("; ")));
    }
    let ops: Vec<Box<dyn AugmentOp>> = plan
        .enabled_ops
        .iter()
        .map(|name| registry.build(name, plan).expect("validated op name"))
        .collect();

    let mut out: Vec<TrainSample> = split
        .train
        .iter()
        .map(|img| TrainSample {
            image: img.clone(),
            pixels: None,
        })
        .collect();
    if ops.is_empty() {
        return Ok(out);
    }

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
    let mut selected = order[..selection_count(split.train.len(), plan.fraction)].to_vec();
    selected.sort_unstable();

    for idx in selected {
        let src = &split.train[idx];
        let pixels = load(&src.filename).map_err(|message| AugmentError::Load {
            filename: src.filename.clone(),
            message,
        })?;
        if (pixels.width(), pixels.height()) != (src.width, src.height) {
            return Err(AugmentError::Load {
                filename: src.filename.clone(),
                message: format!(
                    "decoded {}x{} but annotation says {}x{}",
                    pixels.width(),
                    pixels.height(),
                    src.width,
                    src.height
                ),
            });
        }
        let boxes = normalize_boxes(src);
        for op in &ops {
            let (img, nboxes) = op.apply(&pixels, &boxes);
            let (w, h) = (img.width(), img.height());
            let image = AnnotatedImage {
                filename: augmented_filename(&src.filename, op.suffix()),
                width: w,
                height: h,
                boxes: nboxes
                    .iter()
                    .map(|b| BoundingBox {
                        xmin: to_pixels(b.xmin.value(), w),
                        ymin: to_pixels(b.ymin.value(), h),
                        xmax: to_pixels(b.xmax.value(), w),
                        ymax: to_pixels(b.ymax.value(), h),
                        class_name: b.class_name.clone(),
                    })
                    .collect(),
            };
            out.push(TrainSample {
                image,
                pixels: Some(img),
            });
        }
    }
    Ok(out)
}
