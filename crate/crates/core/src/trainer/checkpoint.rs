//! Binary parameter snapshots. Every parameter is stored as a named
//! float32 record; three reserved records carry the step counter, a hash of
//! the config snapshot, and an integrity fingerprint over the parameter
//! payload so silent corruption is caught at load time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor};

pub const CKPT_MAGIC: [u8; 4] = *b"MTST";
pub const CKPT_VERSION: u32 = 1;

const STEP_KEY: &str = "__step";
const CONFIG_KEY: &str = "__config";
const FINGERPRINT_KEY: &str = "__fingerprint";

/// FNV-1a over bytes; used for config and payload fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Split a 64-bit hash into four 16-bit words, each exactly representable
/// as a float32 record value.
fn hash_to_words(h: u64) -> Vec<f32> {
    (0..4).map(|i| ((h >> (16 * i)) & 0xFFFF) as f32).collect()
}

fn words_to_hash(words: &[f32]) -> u64 {
    words
        .iter()
        .enumerate()
        .fold(0u64, |h, (i, &w)| h | ((w as u64 & 0xFFFF) << (16 * i)))
}

/// A loaded snapshot: parameters as value tensors plus run metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Copy every stored parameter into the graph. The name sets must match
    /// exactly and shapes must agree.
    pub fn apply_to_graph(&self, graph: &Graph) -> Result<()> {
        let graph_names = graph.param_names();
        for name in &graph_names {
            if !self.params.contains_key(name) {
                return Err(Error::config(format!(
                    "checkpoint is missing parameter `{name}`"
                )));
            }
        }
        if self.params.len() != graph_names.len() {
            let extra = self
                .params
                .keys()
                .find(|k| !graph_names.contains(k))
                .expect("count mismatch implies an extra name");
            return Err(Error::config(format!(
                "checkpoint carries parameter `{extra}` unknown to this model"
            )));
        }
        for (name, tensor) in &self.params {
            let want = graph.param_value(name)?.shape().to_vec();
            if tensor.shape() != want {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: tensor.shape().to_vec(),
                    rhs: want,
                });
            }
            graph.set_param_data(name, tensor.values())?;
        }
        Ok(())
    }
}

fn encode_record(name: &str, shape: &[usize], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + name.len() + 4 + 4 * shape.len() + 4 * values.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Snapshot every graph parameter plus metadata. Values are stored as
/// float32, so save -> load -> save is byte-identical.
pub fn save_checkpoint(path: &Path, graph: &Graph, step: u64, config_hash: u64) -> Result<()> {
    if step >= 1 << 24 {
        return Err(Error::contract(format!(
            "step {step} exceeds the exact float32 range of the step record"
        )));
    }
    let mut param_records = Vec::new();
    for name in graph.param_names() {
        if name.len() > u16::MAX as usize {
            return Err(Error::contract(format!(
                "parameter name longer than {} bytes: `{name}`",
                u16::MAX
            )));
        }
        let value = graph.param_value(&name)?;
        let vals: Vec<f32> = value.values().iter().map(|&v| v as f32).collect();
        param_records.push(encode_record(&name, value.shape(), &vals));
    }
    let payload: Vec<u8> = param_records.concat();
    let fingerprint = fnv1a64(&payload);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    let count = (param_records.len() + 3) as u64;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    w.write_all(&encode_record(CONFIG_KEY, &[4], &hash_to_words(config_hash)))
        .map_err(io)?;
    w.write_all(&encode_record(FINGERPRINT_KEY, &[4], &hash_to_words(fingerprint)))
        .map_err(io)?;
    w.write_all(&encode_record(STEP_KEY, &[1], &[step as f32]))
        .map_err(io)?;
    w.write_all(&payload).map_err(io)?;
    w.flush().map_err(io)
}

struct RawRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
    bytes: Vec<u8>,
    offset: u64,
}

fn read_record<R: std::io::Read>(r: &mut ByteReader<R>) -> Result<RawRecord> {
    let offset = r.offset;
    let name_len = r.u16("record name length")? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.take(&mut name_bytes, "record name")?;
    let name = String::from_utf8(name_bytes).map_err(|e| {
        Error::format(r.path, offset + 2, format!("record name is not UTF-8: {e}"))
    })?;
    let rank = r.u32("record rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(
            r.path,
            r.offset - 4,
            format!("implausible tensor rank {rank} for record `{name}`"),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let dim_offset = r.offset;
        let d = r.u32("record dimension")? as usize;
        if d == 0 {
            return Err(Error::format(
                r.path,
                dim_offset,
                format!("zero dimension in record `{name}`"),
            ));
        }
        numel = numel.checked_mul(d).ok_or_else(|| {
            Error::format(r.path, dim_offset, format!("record `{name}` overflows"))
        })?;
        shape.push(d);
    }
    let mut values = Vec::with_capacity(numel);
    let mut b = [0u8; 4];
    for _ in 0..numel {
        r.take(&mut b, "record values")?;
        values.push(f32::from_le_bytes(b));
    }
    let bytes = encode_record(&name, &shape, &values);
    Ok(RawRecord {
        name,
        shape,
        values,
        bytes,
        offset,
    })
}

fn reserved_hash(rec: &RawRecord, path: &Path) -> Result<u64> {
    if rec.shape != [4] {
        return Err(Error::format(
            path,
            rec.offset,
            format!("reserved record `{}` must hold 4 values", rec.name),
        ));
    }
    Ok(words_to_hash(&rec.values))
}

/// Read a snapshot back, verifying the payload fingerprint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(BufReader::new(file), path);
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}"),
        ));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}, expected {CKPT_VERSION}"),
        ));
    }
    let count = r.u64("record count")?;

    let mut step = None;
    let mut config_hash = None;
    let mut stored_fingerprint = None;
    let mut params = BTreeMap::new();
    let mut payload = Vec::new();
    let mut payload_offset = None;
    for _ in 0..count {
        let rec = read_record(&mut r)?;
        match rec.name.as_str() {
            STEP_KEY => {
                if rec.shape != [1] {
                    return Err(Error::format(path, rec.offset, "step record must be scalar"));
                }
                let v = rec.values[0];
                if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::format(
                        path,
                        rec.offset,
                        format!("step record holds a non-integer value {v}"),
                    ));
                }
                step = Some(v as u64);
            }
            CONFIG_KEY => config_hash = Some(reserved_hash(&rec, path)?),
            FINGERPRINT_KEY => stored_fingerprint = Some(reserved_hash(&rec, path)?),
            _ => {
                if rec.name.starts_with("__") {
                    return Err(Error::format(
                        path,
                        rec.offset,
                        format!("unknown reserved record `{}`", rec.name),
                    ));
                }
                payload_offset.get_or_insert(rec.offset);
                let data: Vec<f64> = rec.values.iter().map(|&v| v as f64).collect();
                let tensor = Tensor::from_vec(rec.shape.clone(), data).map_err(|e| {
                    Error::format(path, rec.offset, format!("record `{}`: {e}", rec.name))
                })?;
                if params.insert(rec.name.clone(), tensor).is_some() {
                    return Err(Error::format(
                        path,
                        rec.offset,
                        format!("duplicate record `{}`", rec.name),
                    ));
                }
                payload.extend_from_slice(&rec.bytes);
            }
        }
    }
    r.expect_eof()?;

    let step = step.ok_or_else(|| Error::format(path, r.offset, "missing step record"))?;
    let config_hash =
        config_hash.ok_or_else(|| Error::format(path, r.offset, "missing config record"))?;
    let stored = stored_fingerprint
        .ok_or_else(|| Error::format(path, r.offset, "missing fingerprint record"))?;
    let computed = fnv1a64(&payload);
    if computed != stored {
        return Err(Error::format(
            path,
            payload_offset.unwrap_or(0),
            format!(
                "fingerprint mismatch: file declares {stored:#018x} but the parameter \
                 payload hashes to {computed:#018x}; the checkpoint is corrupt"
            ),
        ));
    }
    Ok(Checkpoint {
        step,
        config_hash,
        params,
    })
}
