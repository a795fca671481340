//! "EMCK" binary checkpoints: parameters, a JSON configuration blob and the
//! Adam state.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{AdamState, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    /// Architecture and training configuration, kept verbatim.
    pub config_json: String,
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, params: &ParamStore, config_json: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::format("EMCK", format!("parameter name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32, t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_f32s(w, &t.data)?;
    }
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;
    let adam = params.adam_state();
    w.write_all(&adam.step.to_le_bytes())?;
    let has_moments = params.names().all(|n| adam.m.contains_key(n) && adam.v.contains_key(n)) && adam.step > 0;
    w.write_all(&[has_moments as u8])?;
    if has_moments {
        for (name, _) in params.iter() {
            write_f32s(w, &adam.m[name])?;
            write_f32s(w, &adam.v[name])?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| Error::format("EMCK", format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn vec(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(len as u64).read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(Error::format("EMCK", "truncated checkpoint"));
        }
        Ok(buf)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.vec(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::format("EMCK", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("EMCK", format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let mut params = ParamStore::new();
    let mut order = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.vec(len)?).map_err(|_| Error::format("EMCK", "parameter name is not UTF-8"))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format("EMCK", format!("unsupported dtype {dtype} for {name}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(numel(&shape))?;
        params.insert(name.clone(), Tensor { shape, data });
        order.push(name);
    }
    let json_len = r.u64()? as usize;
    let config_json = String::from_utf8(r.vec(json_len)?).map_err(|_| Error::format("EMCK", "config blob is not UTF-8"))?;
    let step = r.u64()?;
    let has_moments = r.u8()? != 0;
    let mut adam = AdamState {
        step,
        m: BTreeMap::new(),
        v: BTreeMap::new(),
    };
    if has_moments {
        // Written in sorted-name order, which is the store's iteration order.
        order.sort();
        for name in order {
            let n = params.get(&name)?.numel();
            adam.m.insert(name.clone(), r.f32s(n)?);
            adam.v.insert(name, r.f32s(n)?);
        }
    }
    params.adam = adam;
    Ok(Checkpoint { params, config_json })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, config_json: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, params, config_json)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
