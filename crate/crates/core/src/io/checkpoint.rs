//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SGNX" | version u32 | model seed u64 | config len u32 | config text
//! | param count u32 | per param: name len u32, name, 4 x u32 dims, f32 data
//! | buffer count u32 | per buffer: name len u32, name, channels u32, f32 mean, f32 var
//! | optimizer flag u8 | [step u64, per param: f32 first moment, f32 second moment]
//! | crc32 of everything before it
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::Error;
use crate::io::config::RunConfig;
use crate::model::SegModel;
use crate::tensor::{BnState, Shape, Tensor};
use crate::train::optim::OptimState;

pub const MAGIC: &[u8; 4] = b"SGNX";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a model, its run config and optionally the optimizer state.
pub fn to_bytes(model: &SegModel<f32>, cfg: &RunConfig, optim: Option<&OptimState<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    let mut snapshot = cfg.clone();
    snapshot.model = model.cfg.clone();
    put_str(&mut out, &snapshot.to_string());
    put_u32(&mut out, model.store.len());
    for p in model.store.params() {
        put_str(&mut out, &p.name);
        for d in p.value.shape().dims() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, p.value.data());
    }
    put_u32(&mut out, model.store.buffers().len());
    for b in model.store.buffers() {
        put_str(&mut out, &b.name);
        put_u32(&mut out, b.state.running_mean.len());
        put_f32s(&mut out, &b.state.running_mean);
        put_f32s(&mut out, &b.state.running_var);
    }
    match optim {
        Some(o) => {
            out.push(1);
            out.extend_from_slice(&o.step.to_le_bytes());
            for (m, v) in o.m.iter().zip(&o.v) {
                put_f32s(&mut out, m.data());
                put_f32s(&mut out, v.data());
            }
        }
        None => out.push(0),
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, Error> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, Error> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub model: SegModel<f32>,
    pub optim: Option<OptimState<f32>>,
}

/// Verifies the header and checksum, rebuilds the model from the stored
/// config and seed, and restores every tensor by name.
pub fn from_bytes(buf: &[u8]) -> Result<Loaded, Error> {
    if buf.len() < 12 || &buf[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, this build reads version {VERSION}")));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (file is corrupt or truncated)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let seed = r.u64()?;
    let config = RunConfig::parse(&r.string()?)?;
    let mut model = SegModel::<f32>::build(&config.model, seed)?;

    let n = r.u32()?;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!("{n} parameters stored, model has {}", model.store.len())));
    }
    for _ in 0..n {
        let name = r.string()?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let shape = Shape::from(dims);
        let id = model.store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if model.store.get(id).shape() != shape {
            return Err(Error::Checkpoint(format!("parameter `{name}` has shape {shape}, model expects {}", model.store.get(id).shape())));
        }
        let data = r.f32s(shape.numel())?;
        *model.store.get_mut(id) = Tensor::from_vec(shape, data)?;
    }
    let nb = r.u32()?;
    if nb != model.store.buffers().len() {
        return Err(Error::Checkpoint(format!("{nb} buffers stored, model has {}", model.store.buffers().len())));
    }
    for i in 0..nb {
        let name = r.string()?;
        let c = r.u32()?;
        if model.store.buffers()[i].name != name || model.store.buffer(i).running_mean.len() != c {
            return Err(Error::Checkpoint(format!("buffer `{name}` does not match the model")));
        }
        let running_mean = r.f32s(c)?;
        let running_var = r.f32s(c)?;
        *model.store.buffer_mut(i) = BnState { running_mean, running_var };
    }
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let mut o = OptimState::new(&model.store, config.train.adamw());
            o.step = r.u64()?;
            for i in 0..o.m.len() {
                let shape = o.m[i].shape();
                o.m[i] = Tensor::from_vec(shape, r.f32s(shape.numel())?)?;
                o.v[i] = Tensor::from_vec(shape, r.f32s(shape.numel())?)?;
            }
            Some(o)
        }
        f => return Err(Error::Checkpoint(format!("invalid optimizer flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Loaded { config, model, optim })
}

/// Writes atomically: a temporary sibling file is written, synced and renamed.
pub fn save_checkpoint(path: &Path, model: &SegModel<f32>, cfg: &RunConfig, optim: Option<&OptimState<f32>>) -> Result<(), Error> {
    write_atomic(path, &to_bytes(model, cfg, optim))
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded, Error> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> (SegModel<f32>, RunConfig) {
        let cfg = RunConfig::from_preset("segnext-micro").unwrap();
        (SegModel::build(&cfg.model, 3).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (model, cfg) = micro();
        let opt = OptimState::new(&model.store, cfg.train.adamw());
        let a = to_bytes(&model, &cfg, Some(&opt));
        let loaded = from_bytes(&a).unwrap();
        assert_eq!(to_bytes(&loaded.model, &loaded.config, loaded.optim.as_ref()), a);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let (model, cfg) = micro();
        let mut a = to_bytes(&model, &cfg, None);
        let mid = a.len() / 2;
        a[mid] ^= 0x40;
        assert!(from_bytes(&a).unwrap_err().to_string().contains("checksum"));
        let mut b = to_bytes(&model, &cfg, None);
        b[4] = 9;
        assert!(from_bytes(&b).unwrap_err().to_string().contains("version"));
        let c = to_bytes(&model, &cfg, None);
        assert!(from_bytes(&c[..c.len() - 10]).is_err());
    }
}
