use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::AnnotatedImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxIssue {
    pub filename: String,
    pub box_index: usize,
    pub message: String,
}

/// Findings from checking annotations against the uploaded image files.
/// Images without boxes are warnings; everything else is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub missing_images: Vec<String>,
    pub invalid_boxes: Vec<BoxIssue>,
    pub duplicate_filenames: Vec<String>,
    pub empty_images: Vec<String>,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        !(self.missing_images.is_empty() && self.invalid_boxes.is_empty() && self.duplicate_filenames.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        !self.has_errors() && self.empty_images.is_empty()
    }
}

/// `image_exists` answers whether an annotation's filename resolves to an
/// uploaded image.
pub fn validate_dataset(images: &[AnnotatedImage], image_exists: impl Fn(&str) -> bool) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = BTreeSet::new();
    let mut dupes = BTreeSet::new();
    for img in images {
        if !seen.insert(img.filename.as_str()) {
            dupes.insert(img.filename.clone());
            continue;
        }
        if !image_exists(&img.filename) {
            report.missing_images.push(img.filename.clone());
        }
        if img.boxes.is_empty() {
            report.empty_images.push(img.filename.clone());
        }
        for (i, b) in img.boxes.iter().enumerate() {
            if let Err(message) = b.check_bounds(img.width, img.height) {
                report.invalid_boxes.push(BoxIssue {
                    filename: img.filename.clone(),
                    box_index: i,
                    message,
                });
            }
        }
    }
    report.duplicate_filenames = dupes.into_iter().collect();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::BoundingBox;

    fn img(name: &str, boxes: usize) -> AnnotatedImage {
        AnnotatedImage {
            filename: name.into(),
            width: 10,
            height: 10,
            boxes: (0..boxes)
                .map(|_| BoundingBox { xmin: 1.0, ymin: 1.0, xmax: 5.0, ymax: 5.0, class_name: "a".into() })
                .collect(),
        }
    }

    #[test]
    fn clean_dataset_has_empty_report() {
        let report = validate_dataset(&[img("a.jpg", 1), img("b.jpg", 2)], |_| true);
        assert!(report.is_empty());
    }

    #[test]
    fn names_missing_image() {
        let report = validate_dataset(&[img("a.jpg", 1), img("c.jpg", 1)], |f| f != "c.jpg");
        assert_eq!(report.missing_images, ["c.jpg"]);
        assert!(report.has_errors());
    }

    #[test]
    fn zero_boxes_is_only_a_warning() {
        let report = validate_dataset(&[img("a.jpg", 0)], |_| true);
        assert_eq!(report.empty_images, ["a.jpg"]);
        assert!(!report.has_errors());
    }

    #[test]
    fn flags_duplicates_and_bad_boxes() {
        let mut bad = img("b.jpg", 1);
        bad.boxes[0].xmax = 50.0;
        let report = validate_dataset(&[img("a.jpg", 1), img("a.jpg", 1), bad], |_| true);
        assert_eq!(report.duplicate_filenames, ["a.jpg"]);
        assert_eq!(report.invalid_boxes.len(), 1);
        assert_eq!(report.invalid_boxes[0].filename, "b.jpg");
    }
}
