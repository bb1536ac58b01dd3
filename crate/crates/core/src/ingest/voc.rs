use roxmltree::{Document, Node};

use super::{AnnotatedImage, BoundingBox, IngestError};

fn err(element: &str, message: impl Into<String>) -> IngestError {
    IngestError::Xml {
        element: element.to_string(),
        message: message.into(),
    }
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(name))
}

fn child_text(node: Node<'_, '_>, name: &str, path: &str) -> Result<String, IngestError> {
    let el = child(node, name).ok_or_else(|| err(path, "missing element"))?;
    Ok(el.text().unwrap_or("").trim().to_string())
}

fn child_number(node: Node<'_, '_>, name: &str, path: &str) -> Result<f64, IngestError> {
    let text = child_text(node, name, path)?;
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| err(path, format!("`{text}` is not a number")))
}

fn dimension(node: Node<'_, '_>, name: &str, path: &str) -> Result<u32, IngestError> {
    let v = child_number(node, name, path)?;
    if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(err(path, format!("`{v}` is not a positive integer")));
    }
    Ok(v as u32)
}

/// Parses one Pascal-VOC-style annotation document.
///
/// Reads `filename`, `size/{width,height}` and every
/// `object/{name, bndbox/{xmin,ymin,xmax,ymax}}`; all other elements are
/// ignored.
pub fn parse_voc_xml(content: &[u8]) -> Result<AnnotatedImage, IngestError> {
    let text = std::str::from_utf8(content).map_err(|e| err("annotation", format!("not UTF-8: {e}")))?;
    let doc = Document::parse(text).map_err(|e| err("annotation", format!("malformed XML: {e}")))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(err(
            root.tag_name().name(),
            "root element must be <annotation>",
        ));
    }
    let filename = child_text(root, "filename", "annotation/filename")?;
    if filename.is_empty() {
        return Err(err("annotation/filename", "empty filename"));
    }
    let size = child(root, "size").ok_or_else(|| err("annotation/size", "missing element"))?;
    let width = dimension(size, "width", "annotation/size/width")?;
    let height = dimension(size, "height", "annotation/size/height")?;

    let mut boxes = Vec::new();
    for (i, object) in root
        .children()
        .filter(|c| c.is_element() && c.has_tag_name("object"))
        .enumerate()
    {
        let at = |suffix: &str| format!("annotation/object[{i}]/{suffix}");
        let class_name = child_text(object, "name", &at("name"))?;
        let bndbox = child(object, "bndbox").ok_or_else(|| err(&at("bndbox"), "missing element"))?;
        let bb = BoundingBox {
            xmin: child_number(bndbox, "xmin", &at("bndbox/xmin"))?,
            ymin: child_number(bndbox, "ymin", &at("bndbox/ymin"))?,
            xmax: child_number(bndbox, "xmax", &at("bndbox/xmax"))?,
            ymax: child_number(bndbox, "ymax", &at("bndbox/ymax"))?,
            class_name,
        };
        bb.check_bounds(width, height)
            .map_err(|m| err(&at("bndbox"), m))?;
        boxes.push(bb);
    }
    Ok(AnnotatedImage {
        filename,
        width,
        height,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAT: &str = r#"<annotation>
  <folder>images</folder>
  <filename>cat.jpg</filename>
  <source><database>Unknown</database></source>
  <size><width>640</width><height>480</height><depth>3</depth></size>
  <segmented>0</segmented>
  <object>
    <name>cat</name>
    <pose>Unspecified</pose>
    <truncated>0</truncated>
    <difficult>0</difficult>
    <bndbox><xmin>48</xmin><ymin>24</ymin><xmax>316</xmax><ymax>229</ymax></bndbox>
  </object>
</annotation>"#;

    /// Independent reading of the fixture: plain substring extraction, no
    /// XML parser involved.
    fn scrape(doc: &str, tag: &str) -> Vec<String> {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        doc.match_indices(&open)
            .map(|(i, _)| {
                let start = i + open.len();
                let end = start + doc[start..].find(&close).unwrap();
                doc[start..end].to_string()
            })
            .collect()
    }

    #[test]
    fn minimal_document_matches_scraped_values() {
        let img = parse_voc_xml(CAT.as_bytes()).unwrap();
        assert_eq!(img.filename, scrape(CAT, "filename")[0]);
        assert_eq!(img.width.to_string(), scrape(CAT, "width")[0]);
        assert_eq!(img.height.to_string(), scrape(CAT, "height")[0]);
        assert_eq!(img.boxes.len(), scrape(CAT, "object").len());
        let b = &img.boxes[0];
        assert_eq!(b.class_name, scrape(CAT, "name")[0]);
        for (tag, v) in [("xmin", b.xmin), ("ymin", b.ymin), ("xmax", b.xmax), ("ymax", b.ymax)] {
            assert_eq!(scrape(CAT, tag)[0].parse::<f64>().unwrap(), v);
        }
        assert_eq!((b.xmin, b.ymin, b.xmax, b.ymax), (48.0, 24.0, 316.0, 229.0));
    }

    #[test]
    fn zero_objects_gives_empty_boxes() {
        let doc = "<annotation><filename>e.png</filename><size><width>10</width><height>10</height></size></annotation>";
        let img = parse_voc_xml(doc.as_bytes()).unwrap();
        assert!(img.boxes.is_empty());
    }

    #[test]
    fn inverted_box_names_the_element() {
        let doc = CAT.replace("<xmax>316</xmax>", "<xmax>10</xmax>");
        match parse_voc_xml(doc.as_bytes()) {
            Err(IngestError::Xml { element, .. }) => assert_eq!(element, "annotation/object[0]/bndbox"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_area_box_rejected() {
        let doc = CAT.replace("<xmax>316</xmax>", "<xmax>48</xmax>");
        assert!(parse_voc_xml(doc.as_bytes()).is_err());
    }

    #[test]
    fn missing_size_and_malformed() {
        let doc = "<annotation><filename>e.png</filename></annotation>";
        match parse_voc_xml(doc.as_bytes()) {
            Err(IngestError::Xml { element, .. }) => assert_eq!(element, "annotation/size"),
            other => panic!("{other:?}"),
        }
        assert!(parse_voc_xml(b"<annotation><filename>").is_err());
    }

    #[test]
    fn real_valued_coordinates_accepted() {
        let doc = CAT.replace("<xmin>48</xmin>", "<xmin>48.5</xmin>");
        assert_eq!(parse_voc_xml(doc.as_bytes()).unwrap().boxes[0].xmin, 48.5);
    }
}
