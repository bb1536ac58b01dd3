//! TFRecord containers and detection `Example` encoding.

mod container;
mod crc32c;
mod example;
mod proto;

pub use container::{read_records, write_records, CrcField, RecordFileStats, RecordWriter};
pub use crc32c::{crc32c, mask, masked_crc32c};
pub use example::{detection_example, encode_detection_example, ExampleRecord, FeatureValue};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("I/O error after {records_written} records: {source}")]
    Io {
        records_written: u64,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("{field} CRC mismatch in record starting at byte offset {offset}")]
    Corrupt { offset: u64, field: CrcField },
    #[error("class `{0}` is not in the labelmap")]
    UnknownClass(String),
    #[error("{0}")]
    Invalid(String),
}
