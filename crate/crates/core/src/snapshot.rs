//! Versioned weight snapshots: a plain-text manifest of metadata and
//! record shapes, followed by every record's values as 64-bit
//! little-endian floats in manifest order.
//!
//! ```text
//! MSIT-SNAPSHOT 1
//! stage=stage1_plain
//! config.channels=32
//! param encoder.stem.weight 32,3,3,3
//! end
//! <binary payload>
//! ```

use std::io::{Read, Write};

use indexmap::IndexMap;

use crate::config::{model_entries, set_model_key};
use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, ParamStore, SrModel};
use crate::reparam::{wrap_model_with_rim, StageTag};
use crate::tensor::Tensor;
use crate::Scalar;

pub const MAGIC: &str = "MSIT-SNAPSHOT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    pub meta: IndexMap<String, String>,
    pub records: ParamStore<f64>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Snapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            head.push_str(&format!("{k}={v}\n"));
        }
        for (name, t) in &self.records {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("param {} {}\n", name, dims.join(",")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in self.records.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| format_err("truncated manifest"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| format_err("manifest is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(format_err("not a snapshot (bad magic line)"));
        }
        let mut meta = IndexMap::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("param ") {
                let (name, dims) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| format_err(format!("bad record line `{line}`")))?;
                let shape = if dims.is_empty() {
                    Vec::new()
                } else {
                    dims.split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| format_err(format!("bad shape in `{line}`")))?
                };
                if shapes.iter().any(|(n, _)| n == name) {
                    return Err(format_err(format!("record `{name}` appears twice")));
                }
                shapes.push((name.to_string(), shape));
            } else if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            } else {
                return Err(format_err(format!("bad manifest line `{line}`")));
            }
        }
        let mut payload = &bytes[pos..];
        let mut records = ParamStore::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if payload.len() < 8 * n {
                return Err(format_err(format!("payload ends inside `{name}`")));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            payload = &payload[8 * n..];
            records.insert(name, Tensor::new(shape, data)?);
        }
        if !payload.is_empty() {
            return Err(format_err(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self { meta, records })
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Element count of every record.
    pub fn num_params(&self) -> usize {
        self.records.values().map(Tensor::len).sum()
    }

    /// Whether the metadata describes a full model.
    pub fn has_model(&self) -> bool {
        self.meta.contains_key("stage")
    }
}

/// Snapshot of a model's stage, configuration and every record.
pub fn snapshot_of<T: Scalar>(model: &SrModel<T>) -> Snapshot {
    let mut meta = IndexMap::new();
    meta.insert("stage".to_string(), model.stage.to_string());
    for (k, v) in model_entries(&model.config) {
        meta.insert(format!("config.{k}"), v);
    }
    let records = model
        .to_store()
        .into_iter()
        .map(|(k, t)| (k, t.cast::<f64>()))
        .collect();
    Snapshot { meta, records }
}

/// Rebuilds a model from a snapshot written by [`snapshot_of`].
pub fn model_from_snapshot<T: Scalar>(snap: &Snapshot) -> Result<SrModel<T>> {
    let stage: StageTag = snap
        .meta
        .get("stage")
        .ok_or_else(|| Error::Consistency("snapshot has no model stage".to_string()))?
        .parse()
        .map_err(Error::Consistency)?;
    let mut cfg = ModelConfig::default();
    for (k, v) in &snap.meta {
        if let Some(key) = k.strip_prefix("config.") {
            if !set_model_key(&mut cfg, key, v)? {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key in snapshot".to_string(),
                });
            }
        } else if k != "stage" {
            return Err(format_err(format!("unknown metadata `{k}`")));
        }
    }
    let mut model = SrModel::<T>::init(&cfg, 0)?;
    match stage {
        StageTag::Stage1Plain => {}
        StageTag::Stage2Rim => model = wrap_model_with_rim(&model)?,
        StageTag::Folded => model.stage = StageTag::Folded,
    }
    let store: ParamStore<T> = snap
        .records
        .iter()
        .map(|(k, t)| (k.clone(), t.cast::<T>()))
        .collect();
    model.load_store(&store)?;
    Ok(model)
}
