//! Named-tensor checkpoint: `SGMT` header, typed records, trailing CRC32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

use super::config::TrainConfig;
use super::model::SegMote;

pub const MAGIC: &[u8; 4] = b"SGMT";
pub const VERSION: u32 = 1;
const CONFIG_RECORD: &str = "__config__";
const U8_CODE: u8 = 2;

struct Record {
    name: String,
    dtype: u8,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn tensor_record<T: Scalar>(name: &str, t: &Tensor<T>) -> Record {
    let mut payload = Vec::with_capacity(t.numel() * 8);
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    Record { name: name.to_string(), dtype: T::DTYPE.code(), dims: t.shape().to_vec(), payload }
}

fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype);
        out.push(r.dims.len() as u8);
        for &d in &r.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&r.payload);
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated record".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unknown version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let dtype = r.take(1)?[0];
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let width = match dtype {
            0 => 4,
            1 => 8,
            U8_CODE => 1,
            _ => return Err(Error::Checkpoint(format!("unknown dtype code {dtype} for `{name}`"))),
        };
        let payload = r.take(dims.iter().product::<usize>() * width)?.to_vec();
        out.push(Record { name, dtype, dims, payload });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last record".into()));
    }
    Ok(out)
}

fn record_tensor<T: Scalar>(r: &Record) -> Result<Tensor<T>> {
    let data: Vec<T> = match r.dtype {
        0 => r.payload.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4")) as f64)).collect(),
        1 => r.payload.chunks_exact(8).map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8")))).collect(),
        _ => return Err(Error::Checkpoint(format!("`{}` is not a float tensor", r.name))),
    };
    Tensor::new(r.dims.clone(), data)
}

/// Serialises config, encoder and model parameters.
pub fn to_bytes<T: Scalar>(model: &SegMote<T>) -> Vec<u8> {
    let cfg = model.config.to_text().into_bytes();
    let mut records = vec![Record { name: CONFIG_RECORD.into(), dtype: U8_CODE, dims: vec![cfg.len()], payload: cfg }];
    for e in model.encoder.store.entries().iter().chain(model.store.entries()) {
        records.push(tensor_record(&e.name, &e.value));
    }
    encode(&records)
}

pub fn save<T: Scalar>(model: &SegMote<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

/// Reads the config stored in a checkpoint, e.g. to pick the element type.
pub fn read_config(bytes: &[u8]) -> Result<TrainConfig> {
    let records = decode(bytes)?;
    config_of(&records)
}

fn config_of(records: &[Record]) -> Result<TrainConfig> {
    let r = records
        .iter()
        .find(|r| r.name == CONFIG_RECORD)
        .ok_or_else(|| Error::Checkpoint("missing config record".into()))?;
    let text = std::str::from_utf8(&r.payload).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    TrainConfig::parse_str(text)
}

/// Rebuilds a model; every tensor must be present with its stored shape.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<SegMote<T>> {
    let records = decode(bytes)?;
    let config = config_of(&records)?;
    let mut model = SegMote::<T>::new(config)?;
    let expected = model.encoder.store.len() + model.store.len();
    if records.len() != expected + 1 {
        return Err(Error::Checkpoint(format!("{} tensors stored, {expected} expected", records.len() - 1)));
    }
    let mut seen = std::collections::HashSet::new();
    for r in records.iter().filter(|r| r.name != CONFIG_RECORD) {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", r.name)));
        }
        let t = record_tensor::<T>(r)?;
        let store = if r.name.starts_with("encoder.") { &mut model.encoder.store } else { &mut model.store };
        let id = store.find(&r.name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", r.name)))?;
        let slot = &mut store.get_mut(id).value;
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("`{}` has shape {:?}, expected {:?}", r.name, t.shape(), slot.shape())));
        }
        *slot = t;
    }
    Ok(model)
}

pub fn load<T: Scalar>(path: &Path) -> Result<SegMote<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Element type a checkpoint was written with.
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    Ok(read_config(bytes)?.dtype)
}
