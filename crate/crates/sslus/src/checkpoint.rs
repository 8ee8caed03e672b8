//! Checkpoint archives: a tar file of named entries. Tensor groups use a
//! small binary layout; configuration and bookkeeping are JSON.
//!
//! Tensor blob: `b"SSLT"`, `u32` count, then per tensor a `u32`-prefixed
//! UTF-8 name, `u32` rank, `u64` dims and little-endian `f64` data.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sslus_core::encoder::ENCODER_PREFIX;
use sslus_core::memory_bank::MemoryBank;
use sslus_core::segmentation::SegmentationModel;
use sslus_core::tensor::{ParamStore, Tensor};
use sslus_core::training::{
    FinetuneConfig, PretextCheckpoint, PretextConfig, PretextModel, RngState, Sgd,
};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSLT";

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Option<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return None;
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).ok()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let bytes = c.take(n.checked_mul(8)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data).ok()?));
    }
    (c.pos == buf.len()).then_some(out)
}

/// Named byte entries, in insertion order.
#[derive(Debug, Default)]
pub struct Archive {
    entries: Vec<(String, Vec<u8>)>,
}

impl Archive {
    pub fn add(&mut self, name: &str, data: Vec<u8>) {
        self.entries.push((name.to_string(), data));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut b = tar::Builder::new(file);
        for (name, data) in &self.entries {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_mtime(0);
            h.set_cksum();
            b.append_data(&mut h, name, data.as_slice())
                .map_err(|e| Error::io(path, e))?;
        }
        b.into_inner().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut a = tar::Archive::new(file);
        let mut entries = Vec::new();
        for e in a.entries().map_err(|e| Error::io(path, e))? {
            let mut e = e.map_err(|e| Error::io(path, e))?;
            let name = e
                .path()
                .map_err(|e| Error::io(path, e))?
                .to_string_lossy()
                .into_owned();
            let mut data = Vec::new();
            e.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
            entries.push((name, data));
        }
        Ok(Archive { entries })
    }

    fn require(&self, path: &Path, name: &str) -> Result<&[u8]> {
        self.get(name)
            .ok_or_else(|| Error::format(path, format!("archive has no `{name}` entry")))
    }

    fn tensors(&self, path: &Path, name: &str) -> Result<Vec<(String, Tensor)>> {
        decode_tensors(self.require(path, name)?).ok_or_else(|| {
            Error::format(path, format!("entry `{name}` is not a valid tensor blob"))
        })
    }

    fn json<T: serde::de::DeserializeOwned>(&self, path: &Path, name: &str) -> Result<T> {
        serde_json::from_slice(self.require(path, name)?)
            .map_err(|e| Error::format(path, format!("entry `{name}`: {e}")))
    }
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("plain data serializes")
}

pub const PRETEXT_ENTRIES: [&str; 9] = [
    "encoder",
    "head_f",
    "head_g",
    "relation_net",
    "memory_bank",
    "optimizer",
    "epoch",
    "config_json",
    "rng_state",
];

pub fn save_pretext(ck: &PretextCheckpoint, path: &Path) -> Result<()> {
    let mut a = Archive::default();
    a.add(
        "encoder",
        encode_tensors(&ck.store.export_prefix(ENCODER_PREFIX)),
    );
    a.add("head_f", encode_tensors(&ck.store.export_prefix("head_f.")));
    a.add("head_g", encode_tensors(&ck.store.export_prefix("head_g.")));
    a.add(
        "relation_net",
        encode_tensors(&ck.store.export_prefix("relation_net.")),
    );
    a.add("memory_bank", json_bytes(&ck.bank));
    a.add(
        "optimizer",
        encode_tensors(&ck.optimizer.export_state(&ck.store)),
    );
    a.add("epoch", ck.epoch.to_string().into_bytes());
    a.add("config_json", json_bytes(&ck.config));
    a.add("rng_state", json_bytes(&ck.rng_state));
    a.write(path)
}

pub fn load_pretext(path: &Path) -> Result<PretextCheckpoint> {
    let a = Archive::read(path)?;
    let config: PretextConfig = a.json(path, "config_json")?;
    config.validate()?;
    let mut store = ParamStore::new();
    PretextModel::new(&mut store, &config)?;
    for (entry, prefix) in [
        ("encoder", ENCODER_PREFIX),
        ("head_f", "head_f."),
        ("head_g", "head_g."),
        ("relation_net", "relation_net."),
    ] {
        store.import_prefix(prefix, &a.tensors(path, entry)?)?;
    }
    let mut bank: MemoryBank = a.json(path, "memory_bank")?;
    bank.rebuild_index()?;
    let mut optimizer = Sgd::new(config.lr, config.momentum, config.weight_decay);
    optimizer.import_state(&store, &a.tensors(path, "optimizer")?)?;
    let epoch = std::str::from_utf8(a.require(path, "epoch")?)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "entry `epoch` is not an integer"))?;
    let rng_state: RngState = a.json(path, "rng_state")?;
    Ok(PretextCheckpoint {
        config,
        epoch,
        store,
        bank,
        optimizer,
        rng_state,
    })
}

/// Encoder tensors from any archive with an `encoder` entry.
pub fn load_encoder_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let a = Archive::read(path).map_err(|e| Error::Config(format!("cannot read weights: {e}")))?;
    a.tensors(path, "encoder")
        .map_err(|e| Error::Config(format!("cannot read weights: {e}")))
}

/// Fine-tuned segmentation model.
pub struct SavedModel {
    pub config: FinetuneConfig,
    pub best_epoch: usize,
    pub model: SegmentationModel,
    pub store: ParamStore,
}

pub fn save_model(m: &SavedModel, path: &Path) -> Result<()> {
    let mut a = Archive::default();
    a.add(
        "encoder",
        encode_tensors(&m.store.export_prefix(ENCODER_PREFIX)),
    );
    a.add(
        "decoder",
        encode_tensors(&m.store.export_prefix("decoder.")),
    );
    a.add("epoch", m.best_epoch.to_string().into_bytes());
    a.add("config_json", json_bytes(&m.config));
    a.write(path)
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let a = Archive::read(path)?;
    let config: FinetuneConfig = a.json(path, "config_json")?;
    let mut store = ParamStore::new();
    let enc = sslus_core::encoder::EncoderConfig::new(config.architecture);
    let model = SegmentationModel::new(&mut store, &enc, &mut sslus_core::rng::stream(0, &[]))?
        .with_input_side(config.image_size);
    store.import_prefix(ENCODER_PREFIX, &a.tensors(path, "encoder")?)?;
    store.import_prefix("decoder.", &a.tensors(path, "decoder")?)?;
    let best_epoch = std::str::from_utf8(a.require(path, "epoch")?)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0);
    Ok(SavedModel {
        config,
        best_epoch,
        model,
        store,
    })
}

/// Tensor groups keyed by entry name, for inspection.
pub fn tensor_entries(path: &Path) -> Result<BTreeMap<String, Vec<(String, Tensor)>>> {
    let a = Archive::read(path)?;
    Ok(a.names()
        .filter_map(|n| decode_tensors(a.get(n)?).map(|t| (n.to_string(), t)))
        .collect())
}
