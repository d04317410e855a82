//! Supernet checkpoints: a binary `FBNS` file plus a JSON manifest sidecar
//! (`<file>.json`) holding the config needed to rebuild the structure.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ArchEncoding, SpaceConfig, Supernet};
use crate::batchnorm::BatchStats;
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, sha256_hex, write_bytes, write_json, ByteReader, ByteWriter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FBNS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnEntry {
    pub name: String,
    pub channels: usize,
    pub updates: u64,
    pub log_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config_digest: String,
    pub config: SpaceConfig,
    /// Set for stand-alone networks.
    pub standalone: Option<ArchEncoding>,
    pub params: Vec<ParamEntry>,
    pub batchnorms: Vec<BnEntry>,
}

/// SHA-256 of the config's JSON serialization (field order is fixed).
pub fn config_digest(config: &SpaceConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(net: &Supernet, path: &Path) -> Result<()> {
    let digest = config_digest(&net.config);
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.bytes(&hex::decode(&digest).expect("hex digest"));
    w.u32(net.store.len() as u32);
    let mut params = Vec::new();
    for (_, p) in net.store.iter() {
        w.str(&p.name);
        w.u8(p.trainable as u8);
        w.u32(p.tensor.shape().len() as u32);
        for &d in p.tensor.shape() {
            w.u64(d as u64);
        }
        w.f64s(p.tensor.data());
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
        });
    }
    w.u32(net.bns.len() as u32);
    let mut batchnorms = Vec::new();
    for bn in &net.bns {
        w.str(&bn.name);
        w.u64(bn.updates());
        w.u32(bn.channels() as u32);
        w.f64s(&bn.running_mean);
        w.f64s(&bn.running_var);
        w.u32(bn.stats_log().len() as u32);
        for s in bn.stats_log() {
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
        batchnorms.push(BnEntry {
            name: bn.name.clone(),
            channels: bn.channels(),
            updates: bn.updates(),
            log_entries: bn.stats_log().len(),
        });
    }
    write_bytes(path, &w.buf)?;
    let manifest = CheckpointManifest {
        format: "FBNS".into(),
        version: VERSION,
        config_digest: digest,
        config: net.config.clone(),
        standalone: net.restricted_to(),
        params,
        batchnorms,
    };
    write_json(&manifest_path(path), &manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<Supernet> {
    let manifest: CheckpointManifest = read_json(&manifest_path(path))?;
    let bytes = read_bytes(path)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let digest = hex::encode(r.take(32)?);
    let expected = config_digest(&manifest.config);
    if digest != expected || manifest.config_digest != expected {
        return Err(r.fail("config digest does not match the manifest"));
    }
    let mut net = match manifest.standalone {
        Some(arch) => Supernet::standalone(&manifest.config, arch)?,
        None => Supernet::build(&manifest.config)?,
    };
    let n_params = r.u32()? as usize;
    if n_params != net.store.len() {
        return Err(r.fail(format!("{n_params} parameters, structure has {}", net.store.len())));
    }
    for _ in 0..n_params {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = net.store.id(&name).ok_or_else(|| r.fail(format!("unknown parameter {name}")))?;
        if net.store.get(id).tensor.shape() != shape.as_slice() {
            return Err(r.fail(format!("shape mismatch for {name}")));
        }
        let data = r.f64s(shape.iter().product())?;
        let p = net.store.get_mut(id);
        p.tensor = Tensor::new(shape, data)?;
        p.trainable = trainable;
    }
    let n_bns = r.u32()? as usize;
    if n_bns != net.bns.len() {
        return Err(r.fail(format!("{n_bns} batch norms, structure has {}", net.bns.len())));
    }
    for i in 0..n_bns {
        let name = r.str()?;
        if name != net.bns[i].name {
            return Err(r.fail(format!("batch norm {i} is {name}, expected {}", net.bns[i].name)));
        }
        let updates = r.u64()?;
        let c = r.u32()? as usize;
        if c != net.bns[i].channels() {
            return Err(r.fail(format!("channel mismatch for {name}")));
        }
        let mean = r.f64s(c)?;
        let var = r.f64s(c)?;
        let n_log = r.u32()? as usize;
        let log = (0..n_log)
            .map(|_| Ok(BatchStats { mean: r.f64s(c)?, var: r.f64s(c)? }))
            .collect::<Result<Vec<_>>>()?;
        net.bns[i].restore(mean, var, updates, log);
    }
    r.finish()?;
    if net.store.iter().any(|(_, p)| !p.tensor.is_finite()) {
        return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
    }
    Ok(net)
}
