//! CRC-32C one bit at a time.

const POLY_REFLECTED: u32 = 0x82F6_3B78;

pub fn crc32c_bitwise(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ POLY_REFLECTED } else { crc >> 1 };
        }
    }
    !crc
}

/// TFRecord's masking: rotate right by 15 and add a constant.
pub fn masked(crc: u32) -> u32 {
    crc.rotate_right(15).wrapping_add(0xA282_EAD8)
}

/// Splits a TFRecord file into payloads, checking both CRCs.
pub fn read_tfrecords(mut buf: &[u8]) -> Result<Vec<Vec<u8>>, String> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        if buf.len() < 12 {
            return Err("short header".into());
        }
        let len_bytes = &buf[..8];
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let len_crc = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if masked(crc32c_bitwise(len_bytes)) != len_crc {
            return Err("length crc".into());
        }
        let rest = &buf[12..];
        if rest.len() < len + 4 {
            return Err("short payload".into());
        }
        let data = &rest[..len];
        let data_crc = u32::from_le_bytes(rest[len..len + 4].try_into().unwrap());
        if masked(crc32c_bitwise(data)) != data_crc {
            return Err("data crc".into());
        }
        out.push(data.to_vec());
        buf = &rest[len + 4..];
    }
    Ok(out)
}
