//! Binary split dumps.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DEQDATA\0"
//! 8       4     version (u32 LE, = 1)
//! 12      1     task (0 prefix_sum, 1 matrix_inversion)
//! 13      3     reserved, zero
//! 16      4     length (prefix sum) or dim (inversion), u32 LE
//! 20      8     count, u64 LE
//! 28      8     generator seed, u64 LE
//! 36      ...   payload
//! ```
//!
//! Prefix-sum payload: `count * length` bits, row-major, least significant
//! bit first within each byte, padding bits zero. Labels are recomputed on
//! load. Inversion payload: `count` condition numbers, then `count * dim^2`
//! matrix entries, then `count * dim^2` inverse entries, all f64 LE.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::{InversionBatch, PrefixSumBatch, Task};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DEQDATA\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    PrefixSum(PrefixSumBatch),
    Inversion(InversionBatch),
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::PrefixSum(_) => Task::PrefixSum,
            Dataset::Inversion(_) => Task::MatrixInversion,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            Dataset::PrefixSum(b) => b.count(),
            Dataset::Inversion(b) => b.count(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DumpHeader {
    pub task: Task,
    /// Sequence length or matrix side.
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

pub fn encode_dataset(data: &Dataset, seed: u64) -> Vec<u8> {
    let (tag, size) = match data {
        Dataset::PrefixSum(b) => (0u8, b.length),
        Dataset::Inversion(b) => (1u8, b.dim),
    };
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[tag, 0, 0, 0]);
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&(data.count() as u64).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    match data {
        Dataset::PrefixSum(b) => {
            let bits = b.bits.data();
            let mut packed = vec![0u8; bits.len().div_ceil(8)];
            for (i, v) in bits.iter().enumerate() {
                if *v != 0.0 {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
        Dataset::Inversion(b) => {
            for v in b.kappas.iter().chain(b.a.data()).chain(b.target.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("dataset dump", msg.into())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode_header(bytes: &[u8]) -> Result<DumpHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let task = match bytes[12] {
        0 => Task::PrefixSum,
        1 => Task::MatrixInversion,
        t => return Err(bad(format!("unknown task tag {t}"))),
    };
    if bytes[13..16] != [0, 0, 0] {
        return Err(bad("reserved bytes are not zero"));
    }
    let size = u32_at(bytes, 16) as usize;
    let count = usize::try_from(u64_at(bytes, 20)).map_err(|_| bad("count overflows"))?;
    if size == 0 || count == 0 {
        return Err(bad("size and count must be positive"));
    }
    Ok(DumpHeader {
        task,
        size,
        count,
        seed: u64_at(bytes, 28),
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(DumpHeader, Dataset)> {
    let h = decode_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let overflow = || bad("declared sizes overflow");
    let data = match h.task {
        Task::PrefixSum => {
            let nbits = h.count.checked_mul(h.size).ok_or_else(overflow)?;
            let nbytes = nbits.div_ceil(8);
            if payload.len() != nbytes {
                return Err(bad(format!(
                    "payload has {} bytes, header implies {nbytes}",
                    payload.len()
                )));
            }
            if nbits % 8 != 0 && payload[nbytes - 1] >> (nbits % 8) != 0 {
                return Err(bad("padding bits are not zero"));
            }
            let rows: Vec<Vec<u8>> = (0..h.count)
                .map(|r| {
                    (0..h.size)
                        .map(|c| {
                            let i = r * h.size + c;
                            (payload[i / 8] >> (i % 8)) & 1
                        })
                        .collect()
                })
                .collect();
            Dataset::PrefixSum(PrefixSumBatch::from_rows(&rows)?)
        }
        Task::MatrixInversion => {
            let per = h.size.checked_mul(h.size).ok_or_else(overflow)?;
            let entries = h.count.checked_mul(per).ok_or_else(overflow)?;
            let floats = entries
                .checked_mul(2)
                .and_then(|v| v.checked_add(h.count))
                .ok_or_else(overflow)?;
            let nbytes = floats.checked_mul(8).ok_or_else(overflow)?;
            if payload.len() != nbytes {
                return Err(bad(format!(
                    "payload has {} bytes, header implies {nbytes}",
                    payload.len()
                )));
            }
            let vals: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value"));
            }
            let kappas = vals[..h.count].to_vec();
            if kappas.iter().any(|k| *k < 1.0) {
                return Err(bad("condition number below 1"));
            }
            let shape = vec![h.count, h.size, h.size];
            let a = Tensor::new(shape.clone(), vals[h.count..h.count + entries].to_vec())?;
            let target = Tensor::new(shape, vals[h.count + entries..].to_vec())?;
            Dataset::Inversion(InversionBatch {
                a,
                target,
                kappas,
                dim: h.size,
            })
        }
    };
    Ok((h, data))
}

pub fn write_dataset(path: &Path, data: &Dataset, seed: u64) -> Result<()> {
    std::fs::write(path, encode_dataset(data, seed)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(DumpHeader, Dataset)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
