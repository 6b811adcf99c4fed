//! `CNNW` weight container: magic, u32 version, 32-byte SHA-256 of the
//! config JSON, the config JSON itself (u32 length prefix), u32 tensor count,
//! then per tensor: u32 name length, name, u32 rank, u32 dims, f32 data.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::ensemble::{EnsembleIndex, EnsembleModel};
use super::network::{NetConfig, Network};
use crate::error::{Error, Result};
use crate::surface::write_atomic;

const MAGIC: &[u8; 4] = b"CNNW";
pub const CHECKPOINT_VERSION: u32 = 1;
const SHIFT: &str = "input.shift";
const SCALE: &str = "input.scale";

pub fn config_digest(config: &NetConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, dims.len());
    for &d in dims {
        put_u32(buf, d);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_network(net: &Network<f32>) -> Vec<u8> {
    let json = serde_json::to_vec(&net.config).expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    buf.extend_from_slice(&Sha256::digest(&json));
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    put_u32(&mut buf, net.layout().len() + 2);
    for spec in net.layout() {
        put_tensor(&mut buf, &spec.name, &spec.dims, &net.params[spec.range()]);
    }
    let c = net.config.in_channels;
    put_tensor(&mut buf, SHIFT, &[c], &net.input_shift);
    put_tensor(&mut buf, SCALE, &[c], &net.input_scale);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::malformed(self.origin, "checkpoint truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_network(bytes: &[u8], origin: &Path) -> Result<Network<f32>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::malformed(origin, "not a CNNW checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::malformed(
            origin,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let digest = r.take(32)?.to_vec();
    let json_len = r.u32()?;
    let json = r.take(json_len)?;
    if Sha256::digest(json).as_slice() != digest.as_slice() {
        return Err(Error::malformed(origin, "config digest mismatch"));
    }
    let config: NetConfig = serde_json::from_slice(json)?;
    config.validate()?;
    let layout = super::network::param_layout(&config);
    let count = r.u32()?;
    if count != layout.len() + 2 {
        return Err(Error::malformed(
            origin,
            format!("expected {} tensors, found {count}", layout.len() + 2),
        ));
    }
    let mut params = Vec::new();
    let mut shift = Vec::new();
    let mut scale = Vec::new();
    for i in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::malformed(origin, "tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let expected = match layout.get(i) {
            Some(spec) => (spec.name.as_str(), spec.dims.clone()),
            None if i == layout.len() => (SHIFT, vec![config.in_channels]),
            None => (SCALE, vec![config.in_channels]),
        };
        if name != expected.0 || dims != expected.1 {
            return Err(Error::malformed(
                origin,
                format!(
                    "tensor {i}: expected {} {:?}, found {name} {dims:?}",
                    expected.0, expected.1
                ),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        match name.as_str() {
            SHIFT => shift.extend(values),
            SCALE => scale.extend(values),
            _ => params.extend(values),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::malformed(origin, "trailing bytes after last tensor"));
    }
    Network::from_parts(config, params, shift, scale)
}

pub fn save_network(path: &Path, net: &Network<f32>) -> Result<()> {
    write_atomic(path, &encode_network(net))
}

pub fn load_network(path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_network(&bytes, path)
}

const ENSEMBLE_INDEX: &str = "ensemble.json";

/// Write one checkpoint per member plus an `ensemble.json` index into `dir`.
pub fn save_ensemble(dir: &Path, ensemble: &EnsembleModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, member) in ensemble.members.iter().enumerate() {
        let name = format!("member_{i:03}.cnnw");
        save_network(&dir.join(&name), member)?;
        files.push(name);
    }
    let index = EnsembleIndex {
        config: ensemble.config.clone(),
        member_seeds: ensemble.member_seeds.clone(),
        member_files: files,
    };
    write_atomic(
        &dir.join(ENSEMBLE_INDEX),
        &serde_json::to_vec_pretty(&index)?,
    )
}

pub fn load_ensemble(dir: &Path) -> Result<EnsembleModel> {
    let index_path = dir.join(ENSEMBLE_INDEX);
    let bytes = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: EnsembleIndex = serde_json::from_slice(&bytes)?;
    let members = index
        .member_files
        .iter()
        .map(|f| load_network(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let model = EnsembleModel::new(members, index.member_seeds)?;
    if model.config != index.config {
        return Err(Error::malformed(
            &index_path,
            "member config differs from ensemble index",
        ));
    }
    Ok(model)
}
