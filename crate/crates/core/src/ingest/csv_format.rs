use std::collections::HashMap;

use super::{AnnotatedImage, BoundingBox, IngestError};

const COLUMNS: [&str; 8] = ["filename", "width", "height", "class", "xmin", "ymin", "xmax", "ymax"];

/// Parses a CSV with one box per row and a header naming (in any order)
/// `filename,width,height,class,xmin,ymin,xmax,ymax`. Rows are grouped by
/// filename in first-seen order.
pub fn parse_annotation_csv(content: &[u8]) -> Result<Vec<AnnotatedImage>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(content);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Csv { line: 1, message: e.to_string() })?
        .clone();
    let mut col = [0usize; 8];
    for (slot, name) in col.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| IngestError::Csv {
                line: 1,
                message: format!("missing column `{name}`"),
            })?;
    }

    let mut images: Vec<AnnotatedImage> = Vec::new();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fail = |message: String| IngestError::Csv { line, message };
        let field = |i: usize| record.get(col[i]).unwrap_or("");
        let number = |i: usize| -> Result<f64, IngestError> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("`{}` in column `{}` is not a number", field(i), COLUMNS[i])))
        };
        let dimension = |i: usize| -> Result<u32, IngestError> {
            let v = number(i)?;
            if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(fail(format!("`{}` is not a positive integer {}", field(i), COLUMNS[i])));
            }
            Ok(v as u32)
        };

        let filename = field(0).to_string();
        if filename.is_empty() {
            return Err(fail("empty filename".into()));
        }
        let (width, height) = (dimension(1)?, dimension(2)?);
        let bb = BoundingBox {
            class_name: field(3).to_string(),
            xmin: number(4)?,
            ymin: number(5)?,
            xmax: number(6)?,
            ymax: number(7)?,
        };
        bb.check_bounds(width, height).map_err(fail)?;

        match by_name.get(&filename) {
            Some(&idx) => {
                let img = &mut images[idx];
                if img.width != width || img.height != height {
                    return Err(fail(format!(
                        "`{filename}` declared as {width}x{height}, earlier as {}x{}",
                        img.width, img.height
                    )));
                }
                img.boxes.push(bb);
            }
            None => {
                by_name.insert(filename.clone(), images.len());
                images.push(AnnotatedImage {
                    filename,
                    width,
                    height,
                    boxes: vec![bb],
                });
            }
        }
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_rows_by_filename() {
        let csv = "filename,width,height,class,xmin,ymin,xmax,ymax\n\
                   a.jpg,640,480,cat,1,2,30,40\n\
                   b.jpg,100,100,dog,5,5,50,50\n\
                   a.jpg,640,480,dog,10,20,300,400\n";
        let imgs = parse_annotation_csv(csv.as_bytes()).unwrap();
        let data_rows = csv.lines().count() - 1;
        assert_eq!(imgs.iter().map(|i| i.boxes.len()).sum::<usize>(), data_rows);
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].filename, "a.jpg");
        assert_eq!(imgs[0].boxes.len(), 2);
        assert_eq!(imgs[1].boxes.len(), 1);
    }

    #[test]
    fn column_order_does_not_matter() {
        let csv = "class,xmax,ymax,xmin,ymin,filename,height,width\ncat,30,40,1,2,a.jpg,480,640\n";
        let imgs = parse_annotation_csv(csv.as_bytes()).unwrap();
        assert_eq!(imgs[0].width, 640);
        assert_eq!(imgs[0].boxes[0].xmax, 30.0);
    }

    #[test]
    fn header_only_is_empty() {
        let imgs = parse_annotation_csv(b"filename,width,height,class,xmin,ymin,xmax,ymax\n").unwrap();
        assert!(imgs.is_empty());
    }

    #[test]
    fn inconsistent_size_reports_second_row() {
        let csv = "filename,width,height,class,xmin,ymin,xmax,ymax\n\
                   a.jpg,640,480,cat,1,2,30,40\n\
                   a.jpg,600,480,cat,1,2,30,40\n";
        assert!(matches!(
            parse_annotation_csv(csv.as_bytes()),
            Err(IngestError::Csv { line: 3, .. })
        ));
    }

    #[test]
    fn missing_column_and_bad_number() {
        assert!(matches!(
            parse_annotation_csv(b"filename,width,height,class,xmin,ymin,xmax\n"),
            Err(IngestError::Csv { line: 1, .. })
        ));
        let csv = "filename,width,height,class,xmin,ymin,xmax,ymax\na.jpg,640,480,cat,one,2,30,40\n";
        assert!(matches!(
            parse_annotation_csv(csv.as_bytes()),
            Err(IngestError::Csv { line: 2, .. })
        ));
    }
}
