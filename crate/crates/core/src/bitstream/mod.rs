//! Entropy coding, parameter records, and the `.nrfc` container.
//!
//! Everything here is normative: two implementations that follow these
//! routines produce identical bytes. Integers are little-endian throughout.

pub mod breakdown;
pub mod cdf;
pub mod container;
pub mod golden;
pub mod jobs;
pub mod range_coder;
pub mod reader;
pub mod weights;

pub use breakdown::{memory_breakdown, BreakdownRow, MemoryBreakdown};
pub use cdf::{gaussian_table, CdfTable, TOTAL_FREQ};
pub use container::{ContainerHeader, PlaneShape, SceneContainer, Substream, SubstreamId};
pub use range_coder::{decode_symbols, encode_symbols, RangeDecoder, RangeEncoder};
pub use weights::{dequantize_weights, quantize_weights, QuantGrid, QuantizedTensorRecord};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoderError {
    #[error("empty symbol range")]
    EmptyRange,
    #[error("table with {entries} entries exceeds 16-bit precision")]
    TableTooLarge { entries: usize },
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("symbol {index} refers to missing table {context}")]
    MissingTable { index: usize, context: usize },
    #[error("symbol {symbol} at {index} is outside a table without escape")]
    OutOfRange { index: usize, symbol: i32 },
    #[error("escaped symbol {symbol} at {index} does not fit in 16 bits")]
    EscapeOverflow { index: usize, symbol: i32 },
    #[error("stream truncated at byte {position}")]
    Truncated { position: usize },
    #[error("symbol count {symbols} does not match {contexts} contexts")]
    CountMismatch { symbols: usize, contexts: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown substream id 0x{id:02x} at byte {offset}")]
    UnknownSubstream { id: u8, offset: usize },
    #[error("substream 0x{id:02x} declares {declared} bytes but only {available} remain")]
    LengthOverrun {
        id: u8,
        declared: usize,
        available: usize,
    },
    #[error("truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("substream 0x{id:02x} out of order")]
    OutOfOrder { id: u8 },
    #[error("duplicate substream 0x{id:02x}")]
    Duplicate { id: u8 },
    #[error("{count} trailing bytes after the last substream")]
    TrailingBytes { count: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("missing substream {0}")]
    MissingSubstream(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
}
