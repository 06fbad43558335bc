//! Binary trace file format (magic `PADT`, version 1) plus helpers to
//! read/write [`AttentionTrace`]s. The byte layout is the external
//! interface for model-hooking scripts; see `docs/trace-format.md` in the
//! repository root.
//!
//! Layout, all integers unsigned 32-bit little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PADT"
//!      4     4  version (= 1)
//!      8     4  num_layers L        (>= 2)
//!     12     4  num_heads H         (>= 1)
//!     16     4  prompt_len          (>= 1)
//!     20     4  num_steps
//!     24    32  segmentation: (start, end) pairs for system, vision,
//!               instruction, output
//!     56   ...  payload
//! ```
//!
//! The payload stores, for step `t` in `0..num_steps`, layer `l` in
//! `1..=L`, head `h` in `1..=H`, a row of `prompt_len + t` IEEE-754 32-bit
//! little-endian floats (the pre-softmax logits of that step's query row),
//! contiguously in exactly this nesting order.
//!
//! The parser is total: any byte input yields either a valid trace or a
//! typed error carrying the byte offset, and declared sizes are checked
//! against the actual input length before anything is allocated.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::LogitRow;
use crate::trace::{AttentionTrace, StepTrace, TokenSegmentation};

pub const TRACE_MAGIC: [u8; 4] = *b"PADT";
pub const TRACE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 56;

/// Hard cap on the declared payload size; anything larger is rejected
/// before allocation.
pub const MAX_PAYLOAD_BYTES: u64 = 1 << 31;

/// Serialize a trace to the on-disk byte layout. In-memory `f64` logits
/// are narrowed to `f32`; a trace that was read from disk round-trips
/// bit-exactly.
pub fn trace_to_bytes(trace: &AttentionTrace) -> Vec<u8> {
    let seg = trace.segmentation();
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    out.extend_from_slice(&(trace.num_layers() as u32).to_le_bytes());
    out.extend_from_slice(&(trace.num_heads() as u32).to_le_bytes());
    out.extend_from_slice(&(trace.prompt_len() as u32).to_le_bytes());
    out.extend_from_slice(&(trace.num_steps() as u32).to_le_bytes());
    for range in [seg.system(), seg.vision(), seg.instruction(), seg.output()] {
        out.extend_from_slice(&(range.start as u32).to_le_bytes());
        out.extend_from_slice(&(range.end as u32).to_le_bytes());
    }
    for step in trace.steps() {
        for layer in step.layers() {
            for row in layer {
                for &v in row.values() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_to_bytes(trace)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parse and fully validate a trace from raw bytes.
pub fn trace_from_bytes(bytes: &[u8]) -> Result<AttentionTrace> {
    if bytes.len() >= 4 {
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != TRACE_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TraceLength {
            offset: 0,
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = read_u32(bytes, 4);
    if version != TRACE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            offset: 4,
            supported: TRACE_VERSION,
        });
    }
    let num_layers = read_u32(bytes, 8) as usize;
    let num_heads = read_u32(bytes, 12) as usize;
    let prompt_len = read_u32(bytes, 16) as usize;
    let num_steps = read_u32(bytes, 20) as usize;

    if num_layers < 2 {
        return Err(Error::TraceValidation {
            offset: 8,
            message: format!("num_layers must be at least 2, got {num_layers}"),
        });
    }
    if num_heads == 0 {
        return Err(Error::TraceValidation {
            offset: 12,
            message: "num_heads must be at least 1".into(),
        });
    }
    if prompt_len == 0 {
        return Err(Error::TraceValidation {
            offset: 16,
            message: "prompt_len must be at least 1".into(),
        });
    }

    let mut seg_fields = [0u32; 8];
    for (i, f) in seg_fields.iter_mut().enumerate() {
        *f = read_u32(bytes, 24 + 4 * i);
    }
    let segmentation = TokenSegmentation::from_ranges(
        seg_fields[0] as usize..seg_fields[1] as usize,
        seg_fields[2] as usize..seg_fields[3] as usize,
        seg_fields[4] as usize..seg_fields[5] as usize,
        seg_fields[6] as usize..seg_fields[7] as usize,
    )
    .map_err(|e| Error::TraceValidation {
        offset: 24,
        message: e.to_string(),
    })?;

    // payload size from the declared dimensions, in checked u128 closed
    // form, rejected before anything is allocated
    let expected_bytes: u64 = {
        let n = num_steps as u128;
        let grid = (num_layers as u128) * (num_heads as u128);
        let triangle = if n == 0 { 0 } else { n * (n - 1) / 2 };
        let row_total = n * prompt_len as u128 + triangle;
        match grid.checked_mul(row_total).and_then(|f| f.checked_mul(4)) {
            Some(b) if b <= MAX_PAYLOAD_BYTES as u128 => b as u64,
            _ => {
                return Err(Error::TraceValidation {
                    offset: 8,
                    message: format!(
                        "declared payload exceeds the {MAX_PAYLOAD_BYTES}-byte cap"
                    ),
                });
            }
        }
    };
    let actual_bytes = (bytes.len() - HEADER_LEN) as u64;
    if actual_bytes != expected_bytes {
        return Err(Error::TraceLength {
            offset: HEADER_LEN,
            expected: expected_bytes,
            actual: actual_bytes,
        });
    }

    let mut cursor = HEADER_LEN;
    let mut steps = Vec::with_capacity(num_steps);
    for t in 0..num_steps {
        let row_len = prompt_len + t;
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let mut rows = Vec::with_capacity(num_heads);
            for _ in 0..num_heads {
                let mut values = Vec::with_capacity(row_len);
                for _ in 0..row_len {
                    let raw: [u8; 4] = bytes[cursor..cursor + 4].try_into().expect("4 bytes");
                    let v = f32::from_le_bytes(raw);
                    if !v.is_finite() {
                        return Err(Error::TraceValidation {
                            offset: cursor,
                            message: format!("non-finite logit {v}"),
                        });
                    }
                    values.push(v as f64);
                    cursor += 4;
                }
                rows.push(LogitRow::new(values).map_err(|e| Error::TraceValidation {
                    offset: cursor,
                    message: e.to_string(),
                })?);
            }
            layers.push(rows);
        }
        steps.push(
            StepTrace::new(row_len - 1, layers).map_err(|e| Error::TraceValidation {
                offset: cursor,
                message: e.to_string(),
            })?,
        );
    }

    AttentionTrace::new(num_layers, num_heads, prompt_len, segmentation, steps).map_err(|e| {
        Error::TraceValidation {
            offset: 0,
            message: e.to_string(),
        }
    })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    trace_from_bytes(&bytes)
}
