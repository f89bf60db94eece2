//! Binary model file.
//!
//! Layout, all integers little-endian:
//! `"CQL1"`, u32 version, u32 config length + config text, u32 parameter
//! count, then per parameter u32 name length + name, u32 rank + u64 dims,
//! and finally every parameter's values as f64 in manifest order.

use std::path::Path;

use crate::cli::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::model::CqlModel;
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"CQL1";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &CqlModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = model.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for p in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::TruncatedPayload(format!("file ends inside {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::TruncatedPayload(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<CqlModel> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config = RunConfig::parse(&r.string("config")?)?;
    let count = r.u32("manifest")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32("parameter rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("parameter shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &buf[r.pos..];
    if payload.len() != total * 8 {
        return Err(Error::TruncatedPayload(format!(
            "manifest needs {} bytes of values, found {}",
            total * 8,
            payload.len()
        )));
    }

    let mut model = CqlModel::new(config)?;
    if manifest.len() != model.store.len() {
        return Err(Error::InvalidConfig(format!(
            "file holds {} parameters, configuration builds {}",
            manifest.len(),
            model.store.len()
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let ids: Vec<_> = model.store.ids().collect();
    for (id, (name, shape)) in ids.into_iter().zip(manifest) {
        let expected = model.store.get(id);
        if expected.name != name || expected.value.shape() != shape.as_slice() {
            return Err(Error::InvalidConfig(format!("parameter `{name}` {shape:?} does not match the configuration")));
        }
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        model.store.set(id, Tensor::new(shape, data)?)?;
    }
    Ok(model)
}

pub fn save_model(model: &CqlModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CqlModel> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.display().to_string()),
        _ => Error::Io(e.to_string()),
    })?;
    from_bytes(&buf)
}
