use super::{ImageBuffer, NormBox};

/// One augmentation: a pixel transform plus the matching box transform.
pub trait AugmentOp: Send + Sync {
    /// Registry name, as used in plans and rendered configs.
    fn name(&self) -> &'static str;
    /// Appended to the file stem of augmented copies.
    fn suffix(&self) -> &'static str;
    fn apply(&self, img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FlipHorizontal;

#[derive(Debug, Clone, Copy, Default)]
pub struct Rotate90Cw;

#[derive(Debug, Clone, Copy)]
pub struct Brightness {
    pub delta: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Contrast {
    pub factor: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Saturation {
    pub factor: f64,
}

fn clamp_round(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Pixel `(x, y)` moves to `(width - 1 - x, y)`; box `[x0, y0, x1, y1]`
/// becomes `[1 - x1, y0, 1 - x0, y1]`.
pub fn flip_horizontal(img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>) {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(w - 1 - x, y, img.get(x, y));
        }
    }
    let boxes = boxes
        .iter()
        .map(|b| NormBox {
            xmin: b.xmax.reflect(),
            ymin: b.ymin,
            xmax: b.xmin.reflect(),
            ymax: b.ymax,
            class_name: b.class_name.clone(),
        })
        .collect();
    (out, boxes)
}

/// Clockwise quarter turn. A `W x H` image becomes `H x W`; pixel `(x, y)`
/// moves to `(H - 1 - y, x)`; box `[x0, y0, x1, y1]` becomes
/// `[1 - y1, x0, 1 - y0, x1]`.
pub fn rotate_90_cw(img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>) {
    let (w, h) = (img.width(), img.height());
    let mut out = ImageBuffer::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set(h - 1 - y, x, img.get(x, y));
        }
    }
    let boxes = boxes
        .iter()
        .map(|b| NormBox {
            xmin: b.ymax.reflect(),
            ymin: b.xmin,
            xmax: b.ymin.reflect(),
            ymax: b.xmax,
            class_name: b.class_name.clone(),
        })
        .collect();
    (out, boxes)
}

/// `p' = clamp(round(p + 255 * delta))`
pub fn adjust_brightness(img: &ImageBuffer, delta: f64) -> ImageBuffer {
    let mut out = img.clone();
    let shift = 255.0 * delta;
    for p in out.pixels_mut() {
        *p = clamp_round(*p as f64 + shift);
    }
    out
}

/// Scales each channel's deviation from that channel's image-wide mean.
pub fn adjust_contrast(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    let n = img.width() as f64 * img.height() as f64;
    let mut sums = [0u64; 3];
    for px in img.pixels().chunks_exact(3) {
        for c in 0..3 {
            sums[c] += px[c] as u64;
        }
    }
    let means = sums.map(|s| s as f64 / n);
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = clamp_round((px[c] as f64 - means[c]) * factor + means[c]);
        }
    }
    out
}

/// Interpolates each pixel against its luma `0.299R + 0.587G + 0.114B`.
pub fn adjust_saturation(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        let gray = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        for p in px.iter_mut() {
            *p = clamp_round(gray + factor * (*p as f64 - gray));
        }
    }
    out
}

impl AugmentOp for FlipHorizontal {
    fn name(&self) -> &'static str {
        "flip_h"
    }
    fn suffix(&self) -> &'static str {
        "_fliph"
    }
    fn apply(&self, img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>) {
        flip_horizontal(img, boxes)
    }
}

impl AugmentOp for Rotate90Cw {
    fn name(&self) -> &'static str {
        "rotate90"
    }
    fn suffix(&self) -> &'static str {
        "_rot90"
    }
    fn apply(&self, img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>) {
        rotate_90_cw(img, boxes)
    }
}

impl AugmentOp for Brightness {
    fn name(&self) -> &'static str {
        "brightness"
    }
    fn suffix(&self) -> &'static str {
        "_bright"
    }
    fn apply(&self, img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>) {
        (adjust_brightness(img, self.delta), boxes.to_vec())
    }
}

impl AugmentOp for Contrast {
    fn name(&self) -> &'static str {
        "contrast"
    }
    fn suffix(&self) -> &'static str {
        "_contrast"
    }
    fn apply(&self, img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>) {
        (adjust_contrast(img, self.factor), boxes.to_vec())
    }
}

impl AugmentOp for Saturation {
    fn name(&self) -> &'static str {
        "saturation"
    }
    fn suffix(&self) -> &'static str {
        "_sat"
    }
    fn apply(&self, img: &ImageBuffer, boxes: &[NormBox]) -> (ImageBuffer, Vec<NormBox>) {
        (adjust_saturation(img, self.factor), boxes.to_vec())
    }
}
