//! The contract every generated MEP honors.
//!
//! Stdout lines (other lines are ignored):
//!
//! ```text
//! MEP_KERNEL_TIME_NS <u64>     one per kernel launch
//! MEP_DATA_BYTES <u64>         size of the generated input
//! MEP_OUTPUT_FILE <path>       where the output tensor was written
//! MEP_STATUS OK                terminal success marker
//! ```
//!
//! The output tensor uses the `MEPO` layout: magic `MEPO`, version byte
//! `0x01`, dtype code byte, rank as u32 LE, each dim as u64 LE, then the
//! little-endian payload.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Nanos;

pub const TAG_KERNEL_TIME: &str = "MEP_KERNEL_TIME_NS";
pub const TAG_DATA_BYTES: &str = "MEP_DATA_BYTES";
pub const TAG_OUTPUT_FILE: &str = "MEP_OUTPUT_FILE";
pub const TAG_STATUS: &str = "MEP_STATUS";

pub const TENSOR_MAGIC: &[u8; 4] = b"MEPO";
pub const TENSOR_VERSION: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("protocol violation on line {line}: {message}")]
    ProtocolViolation { line: usize, message: String },
}

/// What one MEP execution reported on stdout.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MepRunReport {
    pub kernel_times_ns: Vec<Nanos>,
    pub data_bytes: Option<u64>,
    pub output_file: Option<PathBuf>,
    pub status_ok: bool,
}

impl MepRunReport {
    /// Per-run kernel time: mean of this run's launch times, rounded half to even.
    pub fn mean_kernel_time_ns(&self) -> Option<Nanos> {
        if self.kernel_times_ns.is_empty() {
            return None;
        }
        let sum: u128 = self.kernel_times_ns.iter().map(|&t| u128::from(t)).sum();
        Some(crate::measurement::div_round_half_even(
            sum,
            self.kernel_times_ns.len() as u128,
        ))
    }
}

/// Extracts the protocol lines from MEP stdout.
pub fn parse_run_report(stdout: &str) -> Result<MepRunReport, ProtocolError> {
    let mut report = MepRunReport::default();
    for (idx, raw) in stdout.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        let (tag, rest) = match line.split_once(char::is_whitespace) {
            Some((t, r)) => (t, r.trim()),
            None => (line, ""),
        };
        let violation = |message: String| ProtocolError::ProtocolViolation {
            line: line_no,
            message,
        };
        match tag {
            TAG_KERNEL_TIME => {
                let v =
                    parse_u64(rest).map_err(|m| violation(format!("{TAG_KERNEL_TIME}: {m}")))?;
                if v == 0 {
                    return Err(violation(format!("{TAG_KERNEL_TIME} must be positive")));
                }
                report.kernel_times_ns.push(v);
            }
            TAG_DATA_BYTES => {
                let v = parse_u64(rest).map_err(|m| violation(format!("{TAG_DATA_BYTES}: {m}")))?;
                report.data_bytes = Some(v);
            }
            TAG_OUTPUT_FILE => {
                if rest.is_empty() {
                    return Err(violation(format!("{TAG_OUTPUT_FILE} without a path")));
                }
                report.output_file = Some(PathBuf::from(rest));
            }
            TAG_STATUS => {
                report.status_ok = rest == "OK";
            }
            _ => {}
        }
    }
    if report.status_ok && report.kernel_times_ns.is_empty() {
        return Err(ProtocolError::ProtocolViolation {
            line: 0,
            message: format!("{TAG_STATUS} OK without any {TAG_KERNEL_TIME} line"),
        });
    }
    Ok(report)
}

fn parse_u64(value: &str) -> Result<u64, String> {
    if value.is_empty() {
        return Err("missing value".into());
    }
    if !value.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("{value:?} is not a non-negative integer"));
    }
    value.parse::<u64>().map_err(|e| format!("{value:?}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl Dtype {
    pub const ALL: [Dtype; 5] = [Dtype::F32, Dtype::F64, Dtype::I32, Dtype::I64, Dtype::U8];

    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::I32 => 2,
            Dtype::I64 => 3,
            Dtype::U8 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        Dtype::ALL.into_iter().find(|d| d.code() == code)
    }

    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F64)
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:?}, expected \"MEPO\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingData(u64),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// One output tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorFile {
    dtype: Dtype,
    dims: Vec<u64>,
    payload: Vec<u8>,
}

impl TensorFile {
    pub fn new(dtype: Dtype, dims: Vec<u64>, payload: Vec<u8>) -> Result<Self, TensorError> {
        let expected = expected_payload_len(dtype, &dims)?;
        if payload.len() as u128 != expected {
            return Err(TensorError::Invalid(format!(
                "payload is {} bytes, dims {:?} of {:?} need {}",
                payload.len(),
                dims,
                dtype,
                expected
            )));
        }
        Ok(TensorFile {
            dtype,
            dims,
            payload,
        })
    }

    pub fn from_f64(dims: Vec<u64>, values: &[f64]) -> Result<Self, TensorError> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorFile::new(Dtype::F64, dims, payload)
    }

    pub fn from_f32(dims: Vec<u64>, values: &[f32]) -> Result<Self, TensorError> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorFile::new(Dtype::F32, dims, payload)
    }

    pub fn from_i32(dims: Vec<u64>, values: &[i32]) -> Result<Self, TensorError> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorFile::new(Dtype::I32, dims, payload)
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn len(&self) -> usize {
        self.payload.len() / self.dtype.element_size()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    /// Float elements widened to f64; `None` for integer tensors.
    pub fn float_values(&self) -> Option<Vec<f64>> {
        match self.dtype {
            Dtype::F64 => Some(
                self.payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F32 => Some(
                self.payload
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Integer elements widened to i64; `None` for float tensors.
    pub fn int_values(&self) -> Option<Vec<i64>> {
        match self.dtype {
            Dtype::I32 => Some(
                self.payload
                    .chunks_exact(4)
                    .map(|c| i64::from(i32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            Dtype::I64 => Some(
                self.payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => Some(self.payload.iter().map(|&b| i64::from(b)).collect()),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + self.payload.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(TENSOR_VERSION);
        out.push(self.dtype.code());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let truncated = |expected: u64| TensorError::TruncatedPayload {
            expected,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(10));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != TENSOR_MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        if bytes.len() < 10 {
            return Err(truncated(10));
        }
        if bytes[4] != TENSOR_VERSION {
            return Err(TensorError::UnsupportedVersion(bytes[4]));
        }
        let dtype = Dtype::from_code(bytes[5]).ok_or(TensorError::UnknownDtype(bytes[5]))?;
        let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as u64;
        let header_len = 10u64
            .checked_add(rank.checked_mul(8).ok_or_else(|| truncated(u64::MAX))?)
            .ok_or_else(|| truncated(u64::MAX))?;
        if (bytes.len() as u64) < header_len {
            return Err(truncated(header_len));
        }
        let dims: Vec<u64> = bytes[10..header_len as usize]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let payload_len = expected_payload_len(dtype, &dims)?;
        let total = u128::from(header_len) + payload_len;
        let actual = bytes.len() as u128;
        if actual < total {
            return Err(TensorError::TruncatedPayload {
                expected: u64::try_from(total).unwrap_or(u64::MAX),
                actual: actual as u64,
            });
        }
        if actual > total {
            return Err(TensorError::TrailingData((actual - total) as u64));
        }
        Ok(TensorFile {
            dtype,
            dims,
            payload: bytes[header_len as usize..].to_vec(),
        })
    }
}

fn expected_payload_len(dtype: Dtype, dims: &[u64]) -> Result<u128, TensorError> {
    if dims.contains(&0) {
        return Err(TensorError::Invalid(format!(
            "dims {dims:?} must all be positive"
        )));
    }
    let mut len = dtype.element_size() as u128;
    for &d in dims {
        len = len
            .checked_mul(u128::from(d))
            .filter(|&l| l <= u128::from(u64::MAX))
            .ok_or_else(|| TensorError::Invalid(format!("dims {dims:?} overflow")))?;
    }
    Ok(len)
}

pub fn write_tensor_file(tensor: &TensorFile, path: &Path) -> Result<(), TensorError> {
    fs::write(path, tensor.to_bytes()).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorFile::from_bytes(&bytes)
}

/// Contract text embedded in MEP-construction and repair prompts.
pub fn mep_contract_text() -> &'static str {
    MEP_CONTRACT
}

const MEP_CONTRACT: &str = "\
MEP CONTRACT (must be followed exactly)
1. Command line: argv[1] is the problem size (a positive integer); argv[2] is the path of the
   output tensor file to write. Derive every dimension of the kernel's inputs from argv[1].
2. Input generation happens inside the program with a deterministic PRNG seeded with 0xC0FFEE.
3. Wrap the kernel definition (and its launch configuration) between two lines containing
   MEP_KERNEL_BEGIN and MEP_KERNEL_END. Only that region may change later; everything else is
   the fixed harness.
4. Print to stdout, one per line:
     MEP_KERNEL_TIME_NS <unsigned integer>   once per timed kernel launch (device time, ns)
     MEP_DATA_BYTES <unsigned integer>       total bytes of generated input data
     MEP_OUTPUT_FILE <path>                  the path written in step 5
     MEP_STATUS OK                           last line, only after everything succeeded
   Any other output is allowed and ignored.
5. Write exactly one output tensor (concatenate multiple logical outputs) in this binary layout:
     bytes 0-3   ASCII \"MEPO\"
     byte  4     version 0x01
     byte  5     dtype code: f32=0 f64=1 i32=2 i64=3 u8=4
     bytes 6-9   rank as unsigned 32-bit little-endian
     then        each dimension as unsigned 64-bit little-endian (all positive)
     then        the elements, little-endian, row-major
6. Exit with status 0 on success and nonzero on any failure.
";
