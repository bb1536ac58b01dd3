//! Annotation ingestion: VOC XML and CSV parsing, labelmaps, dataset
//! splitting and validation against uploaded images.

mod csv_format;
mod labelmap;
mod split;
mod validate;
mod voc;

use serde::{Deserialize, Serialize};

pub use csv_format::parse_annotation_csv;
pub use labelmap::{build_labelmap, parse_labelmap_text, render_labelmap_text, LabelEntry, LabelMap};
pub use split::{split_dataset, DatasetSplit};
pub use validate::{validate_dataset, BoxIssue, ValidationReport};
pub use voc::parse_voc_xml;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IngestError {
    #[error("parse error in <{element}>: {message}")]
    Xml { element: String, message: String },
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("labelmap parse error at line {line}: {message}")]
    Labelmap { line: usize, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

/// An axis-aligned box in absolute pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub class_name: String,
}

impl BoundingBox {
    /// Checks `0 <= min < max <= extent` on both axes and a non-empty class.
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<(), String> {
        if self.class_name.trim().is_empty() {
            return Err("empty class name".into());
        }
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite coordinate".into());
        }
        if !(0.0 <= self.xmin && self.xmin < self.xmax && self.xmax <= width as f64) {
            return Err(format!(
                "x range [{}, {}] invalid for width {width}",
                self.xmin, self.xmax
            ));
        }
        if !(0.0 <= self.ymin && self.ymin < self.ymax && self.ymax <= height as f64) {
            return Err(format!(
                "y range [{}, {}] invalid for height {height}",
                self.ymin, self.ymax
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
}
