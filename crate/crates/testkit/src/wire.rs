//! Protocol Buffers wire decoding for the `Example` schema:
//! `Example{1: Features}`, `Features{1: map<string, Feature>}`,
//! `Feature{oneof 1: BytesList, 2: FloatList, 3: Int64List}`, each list a
//! repeated field 1.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub enum Field<'a> {
    Varint(u64),
    Fixed64([u8; 8]),
    Bytes(&'a [u8]),
    Fixed32([u8; 4]),
}

fn varint(buf: &[u8], pos: &mut usize) -> Result<u64, String> {
    let mut out = 0u64;
    let mut shift = 0;
    loop {
        let b = *buf.get(*pos).ok_or("eof in varint")?;
        *pos += 1;
        if shift >= 64 {
            return Err("varint overflow".into());
        }
        out |= ((b & 0x7f) as u64) << shift;
        if b < 0x80 {
            return Ok(out);
        }
        shift += 7;
    }
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], String> {
    if buf.len() - *pos < n {
        return Err("eof in field".into());
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

/// Every `(field number, value)` of one message, in wire order.
pub fn fields(buf: &[u8]) -> Result<Vec<(u64, Field<'_>)>, String> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < buf.len() {
        let key = varint(buf, &mut pos)?;
        let value = match key & 7 {
            0 => Field::Varint(varint(buf, &mut pos)?),
            1 => Field::Fixed64(take(buf, &mut pos, 8)?.try_into().unwrap()),
            2 => {
                let n = varint(buf, &mut pos)? as usize;
                Field::Bytes(take(buf, &mut pos, n)?)
            }
            5 => Field::Fixed32(take(buf, &mut pos, 4)?.try_into().unwrap()),
            t => return Err(format!("wire type {t}")),
        };
        out.push((key >> 3, value));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bytes(Vec<Vec<u8>>),
    Floats(Vec<f32>),
    Ints(Vec<i64>),
}

fn list(kind: u64, buf: &[u8]) -> Result<Value, String> {
    let mut bytes = Vec::new();
    let mut floats = Vec::new();
    let mut ints = Vec::new();
    for (n, f) in fields(buf)? {
        if n != 1 {
            continue;
        }
        match (kind, f) {
            (1, Field::Bytes(b)) => bytes.push(b.to_vec()),
            (2, Field::Fixed32(b)) => floats.push(f32::from_le_bytes(b)),
            (2, Field::Bytes(b)) => {
                if b.len() % 4 != 0 {
                    return Err("ragged packed floats".into());
                }
                for c in b.chunks(4) {
                    floats.push(f32::from_le_bytes(c.try_into().unwrap()));
                }
            }
            (3, Field::Varint(v)) => ints.push(v as i64),
            (3, Field::Bytes(b)) => {
                let mut p = 0;
                while p < b.len() {
                    ints.push(varint(b, &mut p)? as i64);
                }
            }
            (k, f) => return Err(format!("list kind {k} cannot hold {f:?}")),
        }
    }
    Ok(match kind {
        1 => Value::Bytes(bytes),
        2 => Value::Floats(floats),
        _ => Value::Ints(ints),
    })
}

pub fn decode_example(buf: &[u8]) -> Result<BTreeMap<String, Value>, String> {
    let mut out = BTreeMap::new();
    for (n, f) in fields(buf)? {
        let (1, Field::Bytes(features)) = (n, f) else { continue };
        for (n, f) in fields(features)? {
            let (1, Field::Bytes(entry)) = (n, f) else { continue };
            let mut key = None;
            let mut value = None;
            for (n, f) in fields(entry)? {
                match (n, f) {
                    (1, Field::Bytes(k)) => key = Some(String::from_utf8(k.to_vec()).map_err(|e| e.to_string())?),
                    (2, Field::Bytes(feature)) => {
                        for (kind, f) in fields(feature)? {
                            if let (1..=3, Field::Bytes(l)) = (kind, f) {
                                value = Some(list(kind, l)?);
                            }
                        }
                    }
                    _ => {}
                }
            }
            out.insert(key.ok_or("map entry without key")?, value.ok_or("map entry without value")?);
        }
    }
    Ok(out)
}
