//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "DEQF"  u32 version
//! u64 metadata length, metadata (UTF-8 JSON)
//! u32 array count, then per array:
//!   u32 name length, name (UTF-8), u8 dtype tag, u32 rank, u64 dims[rank],
//!   raw element bytes
//! ```
//!
//! Arrays are `param/<name>`, optionally `adam/m/<name>`, `adam/v/<name>`
//! and `adam/t`, and optionally `rng/seed` and `rng/position`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::deq::SolverConfig;
use crate::eqnet::{EqNet, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"DEQF";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;
const DTYPE_U64: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub energy_offset: f64,
    pub epoch: usize,
    pub step: u64,
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
}

enum Data {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

struct Array {
    name: String,
    dims: Vec<u64>,
    data: Data,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_bytes<R: Read>(r: &mut R, n: u64) -> Result<Vec<u8>> {
    const LIMIT: u64 = 1 << 34;
    if n > LIMIT {
        return Err(Error::Checkpoint(format!("implausible block length {n}")));
    }
    let mut b = Vec::new();
    r.take(n).read_to_end(&mut b)?;
    if b.len() as u64 != n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(b)
}

fn write_array<W: Write>(w: &mut W, a: &Array) -> Result<()> {
    put_u32(w, a.name.len() as u32)?;
    w.write_all(a.name.as_bytes())?;
    let tag = match a.data {
        Data::F64(_) => DTYPE_F64,
        Data::U8(_) => DTYPE_U8,
        Data::U64(_) => DTYPE_U64,
    };
    w.write_all(&[tag])?;
    put_u32(w, a.dims.len() as u32)?;
    for &d in &a.dims {
        put_u64(w, d)?;
    }
    match &a.data {
        Data::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        Data::U8(v) => w.write_all(v)?,
        Data::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R) -> Result<Array> {
    let n = get_u32(r)?;
    let name = String::from_utf8(get_bytes(r, n as u64)?).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
    let [tag] = get::<1, _>(r)?;
    let rank = get_u32(r)?;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("array {name} has rank {rank}")));
    }
    let dims = (0..rank).map(|_| get_u64(r)).collect::<Result<Vec<u64>>>()?;
    let count = dims
        .iter()
        .try_fold(1u64, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Checkpoint(format!("array {name} is too large")))?;
    let data = match tag {
        DTYPE_F64 => Data::F64(
            get_bytes(r, count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
        DTYPE_U8 => Data::U8(get_bytes(r, count)?),
        DTYPE_U64 => Data::U64(
            get_bytes(r, count * 8)?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
        t => return Err(Error::Checkpoint(format!("array {name} has unknown dtype tag {t}"))),
    };
    Ok(Array { name, dims, data })
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_u64(&mut w, meta.len() as u64)?;
        w.write_all(&meta)?;
        let mut arrays = Vec::new();
        let dims = |shape: &[usize]| shape.iter().map(|&d| d as u64).collect::<Vec<u64>>();
        let per_param = |prefix: &str, values: &[f64], arrays: &mut Vec<Array>| {
            for s in &self.params.specs {
                arrays.push(Array {
                    name: format!("{prefix}/{}", s.name),
                    dims: dims(&s.shape),
                    data: Data::F64(values[s.offset..s.offset + s.len()].to_vec()),
                });
            }
        };
        per_param("param", &self.params.data, &mut arrays);
        if let Some(o) = &self.optimizer {
            if o.m.len() != self.params.len() || o.v.len() != self.params.len() {
                return Err(Error::LayoutMismatch("optimizer moments differ in length from the parameters".into()));
            }
            per_param("adam/m", &o.m, &mut arrays);
            per_param("adam/v", &o.v, &mut arrays);
            arrays.push(Array {
                name: "adam/t".into(),
                dims: vec![1],
                data: Data::U64(vec![o.t]),
            });
        }
        if let Some(r) = &self.rng {
            arrays.push(Array {
                name: "rng/seed".into(),
                dims: vec![32],
                data: Data::U8(r.seed.to_vec()),
            });
            arrays.push(Array {
                name: "rng/position".into(),
                dims: vec![3],
                data: Data::U64(vec![r.stream, r.word_pos as u64, (r.word_pos >> 64) as u64]),
            });
        }
        put_u32(&mut w, arrays.len() as u32)?;
        for a in &arrays {
            write_array(&mut w, a)?;
        }
        Ok(())
    }

    /// Reads a checkpoint and checks its parameter arrays against the
    /// layout implied by its model configuration.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let magic: [u8; 4] = get(&mut r)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = get_u64(&mut r)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&get_bytes(&mut r, n)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = get_u32(&mut r)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            arrays.push(read_array(&mut r)?);
        }
        let net = EqNet::new(meta.model.clone())?;
        let specs = net.param_specs().to_vec();
        let total = net.num_params();
        let take_group = |prefix: &str| -> Result<Option<Vec<f64>>> {
            let mut out = vec![0.0; total];
            let mut found = 0;
            for s in &specs {
                let name = format!("{prefix}/{}", s.name);
                let Some(a) = arrays.iter().find(|a| a.name == name) else { continue };
                found += 1;
                let want: Vec<u64> = s.shape.iter().map(|&d| d as u64).collect();
                match &a.data {
                    Data::F64(v) if a.dims == want => out[s.offset..s.offset + s.len()].copy_from_slice(v),
                    _ => {
                        return Err(Error::LayoutMismatch(format!(
                            "array {name} has shape {:?}, the model expects {want:?}",
                            a.dims
                        )))
                    }
                }
            }
            match found {
                0 => Ok(None),
                f if f == specs.len() => Ok(Some(out)),
                _ => Err(Error::LayoutMismatch(format!("{prefix}: some arrays are missing"))),
            }
        };
        let expected: std::collections::BTreeSet<String> = specs.iter().map(|s| format!("param/{}", s.name)).collect();
        if let Some(extra) = arrays
            .iter()
            .find(|a| a.name.starts_with("param/") && !expected.contains(&a.name))
        {
            return Err(Error::LayoutMismatch(format!("unexpected array {}", extra.name)));
        }
        let data = take_group("param")?.ok_or_else(|| Error::LayoutMismatch("no parameter arrays".into()))?;
        let optimizer = match (take_group("adam/m")?, take_group("adam/v")?) {
            (Some(m), Some(v)) => {
                let t = match arrays.iter().find(|a| a.name == "adam/t").map(|a| &a.data) {
                    Some(Data::U64(t)) if t.len() == 1 => t[0],
                    _ => return Err(Error::Checkpoint("missing optimizer step count".into())),
                };
                Some(AdamState { m, v, t })
            }
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete optimizer state".into())),
        };
        let seed = arrays.iter().find(|a| a.name == "rng/seed");
        let pos = arrays.iter().find(|a| a.name == "rng/position");
        let rng = match (seed.map(|a| &a.data), pos.map(|a| &a.data)) {
            (Some(Data::U8(s)), Some(Data::U64(p))) if s.len() == 32 && p.len() == 3 => Some(RngState {
                seed: s[..].try_into().expect("32 bytes"),
                stream: p[0],
                word_pos: p[1] as u128 | (p[2] as u128) << 64,
            }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("malformed RNG state".into())),
        };
        Ok(Self {
            meta,
            params: ParamSet { specs, data },
            optimizer,
            rng,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        self.write(&mut b)?;
        Ok(b)
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(EqNet::new(self.meta.model.clone())?, self.params.clone(), self.meta.energy_offset)
    }

    /// Refuses parameters laid out for a different network.
    pub fn check_compatible(&self, net: &EqNet) -> Result<()> {
        self.params.check_layout(net.param_specs())
    }
}
