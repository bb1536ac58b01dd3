use std::io::Cursor;

use serde::{Deserialize, Serialize};

use super::AugmentError;

/// Row-major RGB8 pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, AugmentError> {
        if width == 0 || height == 0 {
            return Err(AugmentError::Image(format!("zero dimension {width}x{height}")));
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(AugmentError::Image(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self::new(width, height, pixels).expect("filled dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Decodes PNG or JPEG bytes (format sniffed from content).
    pub fn decode(bytes: &[u8]) -> Result<Self, AugmentError> {
        let img = image::load_from_memory(bytes).map_err(|e| AugmentError::Image(e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        image::write_buffer_with_format(
            &mut Cursor::new(&mut out),
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .expect("in-memory PNG encoding");
        out
    }
}

/// A coordinate in `[0, 1]` that also carries its complement `1 - v`.
///
/// Reflections swap the two fields instead of recomputing `1 - v`, so
/// flipping twice (or rotating four times) restores the exact same floats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct UnitCoord {
    value: f64,
    complement: f64,
}

impl UnitCoord {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            complement: 1.0 - value,
        }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    /// `1 - self`.
    pub fn reflect(self) -> Self {
        Self {
            value: self.complement,
            complement: self.value,
        }
    }
}

impl From<f64> for UnitCoord {
    fn from(v: f64) -> Self {
        Self::new(v)
    }
}

impl From<UnitCoord> for f64 {
    fn from(c: UnitCoord) -> f64 {
        c.value
    }
}

/// A box normalized to image extent, `[xmin, ymin, xmax, ymax]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub xmin: UnitCoord,
    pub ymin: UnitCoord,
    pub xmax: UnitCoord,
    pub ymax: UnitCoord,
    pub class_name: String,
}

impl NormBox {
    pub fn new(coords: [f64; 4], class_name: impl Into<String>) -> Self {
        Self {
            xmin: coords[0].into(),
            ymin: coords[1].into(),
            xmax: coords[2].into(),
            ymax: coords[3].into(),
            class_name: class_name.into(),
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.xmin.value(), self.ymin.value(), self.xmax.value(), self.ymax.value()]
    }

    pub fn is_valid(&self) -> bool {
        let [x0, y0, x1, y1] = self.coords();
        (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && x0 < x1
            && y0 < y1
    }
}
