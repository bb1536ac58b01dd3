use std::collections::BTreeMap;

use super::proto::{put_len_delimited, put_tag, put_varint, Reader, WIRE_LEN};
use super::RecordError;
use crate::ingest::{AnnotatedImage, LabelMap};

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Bytes(Vec<Vec<u8>>),
    Float(Vec<f32>),
    Int64(Vec<i64>),
}

/// `Example{1: Features}`, `Features{1: map<string, Feature>}`. Keys are
/// serialized in ascending order so identical inputs give identical bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleRecord {
    pub features: BTreeMap<String, FeatureValue>,
}

impl FeatureValue {
    /// `Feature{oneof 1: BytesList, 2: FloatList, 3: Int64List}` with each
    /// list holding `repeated value = 1` (numeric lists packed).
    fn encode(&self) -> Vec<u8> {
        let mut list = Vec::new();
        let field = match self {
            FeatureValue::Bytes(values) => {
                for v in values {
                    put_len_delimited(&mut list, 1, v);
                }
                1
            }
            FeatureValue::Float(values) => {
                if !values.is_empty() {
                    put_tag(&mut list, 1, WIRE_LEN);
                    put_varint(&mut list, 4 * values.len() as u64);
                    for v in values {
                        list.extend_from_slice(&v.to_le_bytes());
                    }
                }
                2
            }
            FeatureValue::Int64(values) => {
                if !values.is_empty() {
                    let mut packed = Vec::new();
                    for &v in values {
                        put_varint(&mut packed, v as u64);
                    }
                    put_len_delimited(&mut list, 1, &packed);
                }
                3
            }
        };
        let mut feature = Vec::new();
        put_len_delimited(&mut feature, field, &list);
        feature
    }
}

fn decode_feature(buf: &[u8]) -> Result<FeatureValue, String> {
    let mut r = Reader::new(buf);
    let mut value = None;
    while !r.is_done() {
        let (field, wire) = r.tag()?;
        if !(1..=3).contains(&field) || wire != 2 {
            r.skip(wire)?;
            continue;
        }
        let mut list = Reader::new(r.len_delimited()?);
        let mut bytes = Vec::new();
        let mut floats = Vec::new();
        let mut ints = Vec::new();
        while !list.is_done() {
            let (f, w) = list.tag()?;
            match (field, f, w) {
                (1, 1, 2) => bytes.push(list.len_delimited()?.to_vec()),
                (2, 1, 2) => {
                    let packed = list.len_delimited()?;
                    if packed.len() % 4 != 0 {
                        return Err("packed float list length is not a multiple of 4".into());
                    }
                    floats.extend(packed.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
                }
                (2, 1, 5) => {
                    let c = list.bytes(4)?;
                    floats.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
                }
                (3, 1, 2) => {
                    let mut packed = Reader::new(list.len_delimited()?);
                    while !packed.is_done() {
                        ints.push(packed.varint()? as i64);
                    }
                }
                (3, 1, 0) => ints.push(list.varint()? as i64),
                (_, _, w) => list.skip(w)?,
            }
        }
        value = Some(match field {
            1 => FeatureValue::Bytes(bytes),
            2 => FeatureValue::Float(floats),
            _ => FeatureValue::Int64(ints),
        });
    }
    value.ok_or_else(|| "feature has no value".into())
}

impl ExampleRecord {
    /// Parses serialized `Example` bytes. Accepts packed and unpacked
    /// numeric lists; unknown fields are skipped.
    pub fn decode(buf: &[u8]) -> Result<Self, RecordError> {
        Self::decode_inner(buf).map_err(|e| RecordError::Invalid(format!("malformed Example: {e}")))
    }

    fn decode_inner(buf: &[u8]) -> Result<Self, String> {
        let mut out = Self::default();
        let mut ex = Reader::new(buf);
        while !ex.is_done() {
            let (field, wire) = ex.tag()?;
            if field != 1 || wire != 2 {
                ex.skip(wire)?;
                continue;
            }
            let mut features = Reader::new(ex.len_delimited()?);
            while !features.is_done() {
                let (f, w) = features.tag()?;
                if f != 1 || w != 2 {
                    features.skip(w)?;
                    continue;
                }
                let mut entry = Reader::new(features.len_delimited()?);
                let mut key = String::new();
                let mut value = None;
                while !entry.is_done() {
                    match entry.tag()? {
                        (1, 2) => {
                            key = String::from_utf8(entry.len_delimited()?.to_vec()).map_err(|_| "feature key is not UTF-8")?
                        }
                        (2, 2) => value = Some(decode_feature(entry.len_delimited()?)?),
                        (_, w) => entry.skip(w)?,
                    }
                }
                out.features.insert(key, value.unwrap_or(FeatureValue::Bytes(Vec::new())));
            }
        }
        Ok(out)
    }

    pub fn bytes(&self, key: &str) -> Option<&[Vec<u8>]> {
        match self.features.get(key) {
            Some(FeatureValue::Bytes(v)) => Some(v),
            _ => None,
        }
    }

    pub fn floats(&self, key: &str) -> Option<&[f32]> {
        match self.features.get(key) {
            Some(FeatureValue::Float(v)) => Some(v),
            _ => None,
        }
    }

    pub fn ints(&self, key: &str) -> Option<&[i64]> {
        match self.features.get(key) {
            Some(FeatureValue::Int64(v)) => Some(v),
            _ => None,
        }
    }

    pub fn insert(&mut self, key: &str, value: FeatureValue) {
        self.features.insert(key.to_string(), value);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut features = Vec::new();
        for (key, value) in &self.features {
            let mut entry = Vec::new();
            put_len_delimited(&mut entry, 1, key.as_bytes());
            put_len_delimited(&mut entry, 2, &value.encode());
            put_len_delimited(&mut features, 1, &entry);
        }
        let mut example = Vec::new();
        put_len_delimited(&mut example, 1, &features);
        example
    }
}

/// Builds the standard detection Example for one image.
///
/// Pixel coordinates are truncated toward zero, then divided by the full
/// width or height.
pub fn detection_example(
    img: &AnnotatedImage,
    image_bytes: &[u8],
    image_format: &str,
    lm: &LabelMap,
) -> Result<ExampleRecord, RecordError> {
    if image_bytes.is_empty() {
        return Err(RecordError::Invalid(format!("`{}` has no image bytes", img.filename)));
    }
    let n = img.boxes.len();
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut text = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    let (w, h) = (img.width as f64, img.height as f64);
    for b in &img.boxes {
        let id = lm
            .id_of(&b.class_name)
            .ok_or_else(|| RecordError::UnknownClass(b.class_name.clone()))?;
        let (x0, x1, y0, y1) = (b.xmin.trunc(), b.xmax.trunc(), b.ymin.trunc(), b.ymax.trunc());
        if !(x0 < x1 && y0 < y1) {
            return Err(RecordError::Invalid(format!(
                "box in `{}` collapses after truncation to whole pixels",
                img.filename
            )));
        }
        xmin.push((x0 / w) as f32);
        xmax.push((x1 / w) as f32);
        ymin.push((y0 / h) as f32);
        ymax.push((y1 / h) as f32);
        text.push(b.class_name.as_bytes().to_vec());
        label.push(id as i64);
    }
    let name = img.filename.as_bytes().to_vec();
    let mut ex = ExampleRecord::default();
    ex.insert("image/encoded", FeatureValue::Bytes(vec![image_bytes.to_vec()]));
    ex.insert("image/format", FeatureValue::Bytes(vec![image_format.as_bytes().to_vec()]));
    ex.insert("image/filename", FeatureValue::Bytes(vec![name.clone()]));
    ex.insert("image/source_id", FeatureValue::Bytes(vec![name]));
    ex.insert("image/height", FeatureValue::Int64(vec![img.height as i64]));
    ex.insert("image/width", FeatureValue::Int64(vec![img.width as i64]));
    ex.insert("image/object/bbox/xmin", FeatureValue::Float(xmin));
    ex.insert("image/object/bbox/xmax", FeatureValue::Float(xmax));
    ex.insert("image/object/bbox/ymin", FeatureValue::Float(ymin));
    ex.insert("image/object/bbox/ymax", FeatureValue::Float(ymax));
    ex.insert("image/object/class/text", FeatureValue::Bytes(text));
    ex.insert("image/object/class/label", FeatureValue::Int64(label));
    Ok(ex)
}

pub fn encode_detection_example(
    img: &AnnotatedImage,
    image_bytes: &[u8],
    image_format: &str,
    lm: &LabelMap,
) -> Result<Vec<u8>, RecordError> {
    Ok(detection_example(img, image_bytes, image_format, lm)?.encode())
}
