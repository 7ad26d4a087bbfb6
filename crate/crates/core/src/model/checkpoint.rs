//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"EMBRCKPT"  u32 version
//! u64 header length, header bytes (UTF-8 `key = value` lines)
//! u64 entry count
//! per entry: u32 name length, name, u32 ndim, ndim x u64 dims, u64 offset
//! f64 data, entry after entry; offsets count f64 values from the data start
//! ```
//!
//! The header carries the model config echo, seed, step count and Adam
//! hyper-parameters. Entries are the parameters in store order, followed by
//! `<name>@adam.m` and `<name>@adam.v` moment buffers.

use std::fs;
use std::path::Path;

use crate::adam::OptimizerState;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EMBRCKPT";
const VERSION: u32 = 1;

fn ckpt_err(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

fn entries(model: &Model) -> Vec<(String, &Tensor)> {
    let store = model.store();
    let mut out: Vec<(String, &Tensor)> = store.iter().map(|p| (p.name.clone(), &p.value)).collect();
    out.extend(store.iter().map(|p| (format!("{}@adam.m", p.name), &p.first_moment)));
    out.extend(store.iter().map(|p| (format!("{}@adam.v", p.name), &p.second_moment)));
    out
}

fn header(model: &Model) -> String {
    let opt = model.optimizer();
    format!(
        "{}\nseed = {}\nstep = {}\nadam_beta1 = {:?}\nadam_beta2 = {:?}\nadam_epsilon = {:?}\n",
        model.config().echo(),
        model.seed(),
        opt.step_count,
        opt.beta1,
        opt.beta2,
        opt.epsilon_hat
    )
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = header(model);
    let entries = entries(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.len() as u64;
    }
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| ckpt_err("size does not fit in memory"))
    }
}

fn header_value<'h>(header: &'h str, key: &str) -> Result<&'h str> {
    header
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| ckpt_err(format!("header is missing `{key}`")))
}

fn header_parse<T: std::str::FromStr>(header: &str, key: &str) -> Result<T> {
    header_value(header, key)?
        .parse()
        .map_err(|_| ckpt_err(format!("header value `{key}` is malformed")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ckpt_err("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.usize()?;
    let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| ckpt_err("header is not UTF-8"))?;
    let config = ModelConfig::from_echo(header)?;
    let seed: u64 = header_parse(header, "seed")?;
    let optimizer = OptimizerState {
        beta1: header_parse(header, "adam_beta1")?,
        beta2: header_parse(header, "adam_beta2")?,
        epsilon_hat: header_parse(header, "adam_epsilon")?,
        step_count: header_parse(header, "step")?,
    };

    let count = r.usize()?;
    let mut directory = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| ckpt_err("entry name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let offset = r.usize()?;
        directory.push((name, shape, offset));
    }
    let data_start = r.pos;

    let mut model = Model::build(&config, seed)?;
    let expected: Vec<(String, Vec<usize>)> = entries(&model)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != directory.len() {
        return Err(ckpt_err(format!(
            "{} entries, the configured model has {}",
            directory.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(directory.len());
    for ((name, shape, offset), (want_name, want_shape)) in directory.iter().zip(&expected) {
        if name != want_name || shape != want_shape {
            return Err(ckpt_err(format!(
                "entry {name} {shape:?} does not match model parameter {want_name} {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let start = offset
            .checked_mul(8)
            .and_then(|o| o.checked_add(data_start))
            .ok_or_else(|| ckpt_err("offset overflow"))?;
        let raw = bytes
            .get(start..start + n * 8)
            .ok_or_else(|| ckpt_err(format!("data for {name} is truncated")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }

    let store = model.store_mut();
    let p = store.len();
    let mut tensors = tensors.into_iter();
    let values: Vec<Tensor> = tensors.by_ref().take(p).collect();
    let firsts: Vec<Tensor> = tensors.by_ref().take(p).collect();
    let seconds: Vec<Tensor> = tensors.collect();
    for (((param, v), m), s) in store.iter_mut().zip(values).zip(firsts).zip(seconds) {
        param.value = v;
        param.first_moment = m;
        param.second_moment = s;
    }
    model.set_optimizer(optimizer);
    Ok(model)
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, to_bytes(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
