//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "RRLDCKPT"
//! version  u32 LE
//! config   u32 LE length + JSON of BackboneConfig
//! tensors  u32 LE count, then per tensor:
//!            u32 name length + UTF-8 name, u32 rank, rank x u64 dims,
//!            prod(dims) x f64 LE
//! adam     u8 flag; if 1: u64 step, then m and v as f64 LE (param count each)
//! ```
//!
//! Floats are stored by bit pattern, so a round trip is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::trainer::AdamState;

const MAGIC: &[u8; 8] = b"RRLDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Model, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let cfg = serde_json::to_vec(model.config())?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    let entries = model.layout().entries();
    put_u32(&mut out, entries.len() as u32);
    for e in entries {
        put_u32(&mut out, e.name.len() as u32);
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.shape.len() as u32);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, &model.params()[e.range.clone()]);
    }
    match optimizer {
        Some(s) => {
            let n = model.params().len();
            if s.m.len() != n || s.v.len() != n {
                return Err(Error::Checkpoint(format!(
                    "optimizer state has {} / {} moments for {n} parameters",
                    s.m.len(),
                    s.v.len()
                )));
            }
            out.push(1);
            out.extend_from_slice(&s.step.to_le_bytes());
            put_f64s(&mut out, &s.m);
            put_f64s(&mut out, &s.v);
        }
        None => out.push(0),
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let config: BackboneConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("bad config record: {e}")))?;
    let mut model = Model::init(config)?;
    let count = r.u32()? as usize;
    if count != model.layout().entries().len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            model.layout().entries().len()
        )));
    }
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let entry = model
            .layout()
            .entry(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}'")))?;
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {shape:?}, expected {:?}",
                entry.shape
            )));
        }
        let values = r.f64s(entry.range.len())?;
        model.param_mut(&name).expect("entry exists").copy_from_slice(&values);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let n = model.params().len();
            let step = r.u64()?;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            Some(AdamState { step, m, v })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, optimizer })
}

pub fn save(path: &Path, model: &Model, optimizer: Option<&AdamState>) -> Result<()> {
    let bytes = encode(model, optimizer)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::init(BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            ..BackboneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = tiny();
        let n = model.params().len();
        let state = AdamState {
            step: 7,
            m: (0..n).map(|i| (i as f64).sin() * 1e-3).collect(),
            v: (0..n).map(|i| (i as f64 * 0.1).cos().powi(2) * 1e-7).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, Some(&state)).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.model.config(), model.config());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.model.params()), bits(model.params()));
        let s = back.optimizer.unwrap();
        assert_eq!((s.step, bits(&s.m), bits(&s.v)), (7, bits(&state.m), bits(&state.v)));
    }

    #[test]
    fn rejects_corruption() {
        let model = tiny();
        let bytes = encode(&model, None).unwrap();
        assert!(decode(&bytes).unwrap().optimizer.is_none());
        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(decode(&wrong_version).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }
}
