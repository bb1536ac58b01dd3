use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::crc32c::masked_crc32c;
use super::RecordError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFileStats {
    pub record_count: u64,
    pub total_payload_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrcField {
    Length,
    Data,
}

impl std::fmt::Display for CrcField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrcField::Length => "length",
            CrcField::Data => "data",
        })
    }
}

/// Streaming TFRecord writer.
///
/// Each record is `u64 len LE | u32 masked_crc(len) LE | payload | u32 masked_crc(payload) LE`.
#[derive(Debug)]
pub struct RecordWriter<W> {
    sink: W,
    stats: RecordFileStats,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(sink: W) -> Self {
        Self {
            sink,
            stats: RecordFileStats::default(),
        }
    }

    pub fn write(&mut self, payload: &[u8]) -> Result<(), RecordError> {
        let len = (payload.len() as u64).to_le_bytes();
        let io_err = |source| RecordError::Io {
            records_written: self.stats.record_count,
            source,
        };
        let mut frame = Vec::with_capacity(payload.len() + 16);
        frame.extend_from_slice(&len);
        frame.extend_from_slice(&masked_crc32c(&len).to_le_bytes());
        frame.extend_from_slice(payload);
        frame.extend_from_slice(&masked_crc32c(payload).to_le_bytes());
        self.sink.write_all(&frame).map_err(io_err)?;
        self.stats.record_count += 1;
        self.stats.total_payload_bytes += payload.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(RecordFileStats, W), RecordError> {
        let records_written = self.stats.record_count;
        self.sink
            .flush()
            .map_err(|source| RecordError::Io { records_written, source })?;
        Ok((self.stats, self.sink))
    }
}

pub fn write_records<W, I, P>(sink: W, payloads: I) -> Result<RecordFileStats, RecordError>
where
    W: Write,
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let mut writer = RecordWriter::new(sink);
    for payload in payloads {
        writer.write(payload.as_ref())?;
    }
    Ok(writer.finish()?.0)
}

/// Fills `buf` completely, or reports how many bytes were available.
fn read_full<R: Read>(source: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads every record, validating both CRCs.
pub fn read_records<R: Read>(mut source: R) -> Result<Vec<Vec<u8>>, RecordError> {
    let mut out = Vec::new();
    let mut offset: u64 = 0;
    let io_err = |n: usize| move |source| RecordError::Io { records_written: n as u64, source };
    loop {
        let mut header = [0u8; 12];
        let got = read_full(&mut source, &mut header).map_err(io_err(out.len()))?;
        if got == 0 {
            return Ok(out);
        }
        if got < header.len() {
            return Err(RecordError::Truncated { offset: offset + got as u64 });
        }
        let (len_bytes, len_crc) = header.split_at(8);
        if masked_crc32c(len_bytes) != u32::from_le_bytes(len_crc.try_into().unwrap()) {
            return Err(RecordError::Corrupt { offset, field: CrcField::Length });
        }
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap());
        let body_start = offset + 12;
        // Read in bounded steps so a bogus length cannot force a huge allocation.
        let mut payload = Vec::new();
        let taken = (&mut source)
            .take(len)
            .read_to_end(&mut payload)
            .map_err(io_err(out.len()))?;
        if (taken as u64) < len {
            return Err(RecordError::Truncated { offset: body_start + taken as u64 });
        }
        let mut footer = [0u8; 4];
        let got = read_full(&mut source, &mut footer).map_err(io_err(out.len()))?;
        if got < 4 {
            return Err(RecordError::Truncated { offset: body_start + len + got as u64 });
        }
        if masked_crc32c(&payload) != u32::from_le_bytes(footer) {
            return Err(RecordError::Corrupt { offset, field: CrcField::Data });
        }
        offset = body_start + len + 4;
        out.push(payload);
    }
}
