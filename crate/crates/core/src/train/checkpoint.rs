//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CCL1"
//! u32 header length, header bytes (canonical JSON: sorted keys)
//! u32 tensor count
//! per tensor: u32 name length, name, u8 dtype bits, u8 rank, u32 dims.., values
//! u32 crc32 of every preceding byte
//! ```
//!
//! The header holds the model config, the Adam step, the tool version and an
//! opaque `run` object. Adam moments are stored as `adam.m.<name>` and
//! `adam.v.<name>`.

use std::path::Path;

use serde_json::{json, Value};

use super::optim::AdamState;
use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{declare, init_params, Model, ModelConfig};

const MAGIC: &[u8; 4] = b"CCL1";
pub const FORMAT_VERSION: u64 = 1;

pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub adam: Option<AdamState<F>>,
    pub run: Value,
    pub tool_version: String,
}

fn canonical(v: &Value) -> String {
    // serde_json's default map is ordered by key.
    v.to_string()
}

pub fn encode_checkpoint<F: Scalar>(model: &Model<F>, adam: Option<&AdamState<F>>, run: &Value) -> Vec<u8> {
    let header = json!({
        "format": FORMAT_VERSION,
        "version": env!("CARGO_PKG_VERSION"),
        "model": serde_json::to_value(model.config()).expect("config serializes"),
        "adam_step": adam.map(|a| a.step),
        "run": run,
    });
    let header = canonical(&header);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());

    let params = model.params();
    let mut tensors: Vec<(String, &Tensor<F>)> = params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    if let Some(a) = adam {
        for (i, (_, n, _)) in params.iter().enumerate() {
            tensors.push((format!("adam.m.{n}"), &a.m[i]));
            tensors.push((format!("adam.v.{n}"), &a.v[i]));
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint<F: Scalar>(model: &Model<F>, adam: Option<&AdamState<F>>, run: &Value, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, adam, run)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_values<F: Scalar>(bytes: &[u8], dtype: u8) -> Result<Vec<F>> {
    match dtype {
        32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect()),
        64 => Ok(bytes
            .chunks_exact(8)
            .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect()),
        d => Err(Error::Checkpoint(format!("unknown dtype {d}"))),
    }
}

/// Parses a checkpoint. With `expected`, the stored model config must match
/// it; tensor shapes are always checked against the stored config.
pub fn decode_checkpoint<F: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<F>> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let hlen = r.u32()?;
    let header: Value = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header["format"].as_u64() != Some(FORMAT_VERSION) {
        return Err(Error::Checkpoint(format!("unsupported format {}", header["format"])));
    }
    let config: ModelConfig = serde_json::from_value(header["model"].clone())
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    if let Some(exp) = expected {
        if exp != &config {
            let (want, _) = declare(exp);
            let (got, _) = declare(&config);
            let shape_diff = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a.0 == b.0 && a.1 != b.1)
                .map(|(a, b)| format!("; {} is {:?}, expected {:?}", a.0, b.1, a.1))
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!(
                "model config mismatch{shape_diff}"
            )));
        }
    }

    let mut store: ParamStore<F> = init_params(&config, 0)?;
    let n_params = store.len();
    let mut adam = header["adam_step"].as_u64().map(|step| AdamState::<F> {
        step,
        m: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        v: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
    });
    let count = r.u32()?;
    let mut seen = vec![false; 3 * n_params];
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let n: usize = dims.iter().product();
        let width = match dtype {
            32 => 4,
            64 => 8,
            d => return Err(Error::Checkpoint(format!("unknown dtype {d}"))),
        };
        let values = read_values::<F>(r.take(n * width)?, dtype)?;
        let (slot, base) = if let Some(rest) = name.strip_prefix("adam.m.") {
            (0, rest)
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            (1, rest)
        } else {
            (2, name.as_str())
        };
        let id = store
            .id(base)
            .filter(|&id| store.name(id) == base)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        let idx = store.ids().position(|i| i == id).expect("id from store");
        let want = store.get(id).shape().to_vec();
        if dims != want {
            return Err(Error::Shape {
                op: "checkpoint",
                lhs: want,
                rhs: dims,
            });
        }
        let t = Tensor::new(dims, values)?;
        match slot {
            2 => *store.get_mut(id) = t,
            s => {
                let a = adam
                    .as_mut()
                    .ok_or_else(|| Error::Checkpoint("optimizer tensor without optimizer state".into()))?;
                if s == 0 {
                    a.m[idx] = t;
                } else {
                    a.v[idx] = t;
                }
            }
        }
        seen[slot * n_params + idx] = true;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let need = if adam.is_some() { 3 * n_params } else { n_params };
    let missing = seen[2 * n_params..].iter().filter(|&&s| !s).count()
        + if adam.is_some() { seen[..2 * n_params].iter().filter(|&&s| !s).count() } else { 0 };
    if missing > 0 {
        return Err(Error::Checkpoint(format!("{missing} of {need} tensors missing")));
    }
    Ok(Checkpoint {
        model: Model::from_params(config, store)?,
        adam,
        run: header["run"].clone(),
        tool_version: header["version"].as_str().unwrap_or_default().to_string(),
    })
}

pub fn load_checkpoint<F: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
