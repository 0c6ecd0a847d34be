//! Checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DEQCKPT\0"
//! 8       4     version (u32 LE, = 1)
//! 12      4     reserved, zero
//! 16      8     manifest length in bytes (u64 LE)
//! 24      n     UTF-8 JSON manifest
//! 24+n    ...   tensor payload, f64 LE, laid out as the manifest says
//! ```
//!
//! Tensors are stored back to back in manifest order; each entry names its
//! group (`param`, `adam_m`, `adam_v`), shape and element offset.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::CellParams;
use crate::error::{Error, Result};
use crate::harness::config::{hex, ExperimentConfig};
use crate::optimizers::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DEQCKPT\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
/// Manifests beyond this are rejected before parsing.
const MAX_MANIFEST: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: TensorGroup,
    shape: Vec<usize>,
    offset: u64,
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::format("checkpoint", "malformed rng state");
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ExperimentConfig,
    config_sha256: String,
    step: u64,
    seed: u64,
    precision: String,
    rng: Option<RngState>,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Trained parameters with everything needed to evaluate or resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: CellParams,
    pub adam: Option<AdamState>,
    pub step: u64,
    pub rng: Option<RngState>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut push = |name: &str, group: TensorGroup, t: &Tensor| {
        entries.push(TensorEntry {
            name: name.to_string(),
            group,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(t.data());
    };
    for (name, t) in ck.params.tensors() {
        push(name, TensorGroup::Param, t);
    }
    if let Some(adam) = &ck.adam {
        for (name, t) in &adam.m {
            push(name, TensorGroup::AdamM, t);
        }
        for (name, t) in &adam.v {
            push(name, TensorGroup::AdamV, t);
        }
    }
    let manifest = Manifest {
        config: ck.config.clone(),
        config_sha256: ck.config.sha256(),
        step: ck.step,
        seed: ck.config.seed,
        precision: "f64".into(),
        rng: ck.rng.clone(),
        adam_step: ck.adam.as_ref().map(|a| a.step),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if bytes[12..16] != [0; 4] {
        return Err(bad("reserved bytes are not zero"));
    }
    let mlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if mlen > MAX_MANIFEST || mlen > (bytes.len() - HEADER_LEN) as u64 {
        return Err(bad(format!("manifest length {mlen} exceeds the file")));
    }
    let mend = HEADER_LEN + mlen as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..mend])
        .map_err(|e| bad(format!("manifest: {e}")))?;
    manifest.config.validate()?;
    if manifest.config_sha256 != manifest.config.sha256() {
        return Err(bad("config hash does not match the embedded config"));
    }
    if manifest.precision != "f64" {
        return Err(bad(format!("unsupported precision {:?}", manifest.precision)));
    }
    if manifest.seed != manifest.config.seed {
        return Err(bad("seed disagrees with the embedded config"));
    }
    let payload = &bytes[mend..];
    if !payload.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let total = (payload.len() / 8) as u64;

    let mut groups: [BTreeMap<String, Tensor>; 3] = Default::default();
    let mut next = 0u64;
    for e in &manifest.tensors {
        if e.offset != next {
            return Err(bad(format!("tensor {} at offset {}, expected {next}", e.name, e.offset)));
        }
        let n = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad(format!("tensor {} shape overflows", e.name)))?;
        let end = next
            .checked_add(n)
            .filter(|end| *end <= total)
            .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?;
        let data: Vec<f64> = payload[next as usize * 8..end as usize * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor {} holds non-finite values", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), data)?;
        let slot = match e.group {
            TensorGroup::Param => 0,
            TensorGroup::AdamM => 1,
            TensorGroup::AdamV => 2,
        };
        if groups[slot].insert(e.name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {}", e.name)));
        }
        next = end;
    }
    if next != total {
        return Err(bad(format!("{} trailing payload values", total - next)));
    }
    let [params, m, v] = groups;
    let params = CellParams::from_tensors(manifest.config.cell.clone(), params)?;
    let adam = match manifest.adam_step {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(bad("optimizer moments without an optimizer step")),
        Some(step) => {
            for moments in [&m, &v] {
                let same = moments.len() == params.tensors().len()
                    && params
                        .tensors()
                        .iter()
                        .all(|(k, p)| moments.get(k).is_some_and(|t| t.shape() == p.shape()));
                if !same {
                    return Err(bad("optimizer moments do not match the parameters"));
                }
            }
            Some(AdamState {
                config: manifest.config.optimizer.adam.clone(),
                m,
                v,
                step,
            })
        }
    };
    if let Some(r) = &manifest.rng {
        r.restore()?;
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        adam,
        step: manifest.step,
        rng: manifest.rng,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
