//! Binary checkpoints.
//!
//! Layout (little-endian): magic `PPEA1`, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u8` dtype tag, `u8` rank, `u64` dims and
//! raw values; a CRC32 of everything before it closes the file. Entries are
//! written in name order, so equal checkpoints serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use glob::Pattern;

use crate::error::{Error, Result};
use crate::geometry::DepthBins;
use crate::networks::{Model, ModelConfig, StudentState};
use crate::tensor::{DType, Scalar, Tensor};
use crate::training::adam::AdamState;

pub const MAGIC: &[u8; 5] = b"PPEA1";
const BYTES_TAG: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    fn from_values<F: Scalar>(shape: &[usize], values: &[F]) -> Self {
        let data = match F::DTYPE {
            DType::F32 => EntryData::F32(values.iter().map(|v| v.f64() as f32).collect()),
            DType::F64 => EntryData::F64(values.iter().map(|v| v.f64()).collect()),
        };
        Self { shape: shape.to_vec(), data }
    }

    fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: EntryData::F64(vec![v]) }
    }

    fn bytes(b: Vec<u8>) -> Self {
        Self { shape: vec![b.len()], data: EntryData::Bytes(b) }
    }

    /// Values converted to `F` (exact when the stored dtype matches).
    pub fn values<F: Scalar>(&self) -> Result<Vec<F>> {
        match &self.data {
            EntryData::F32(v) => Ok(v.iter().map(|&x| F::lit(x as f64)).collect()),
            EntryData::F64(v) => Ok(v.iter().map(|&x| F::lit(x)).collect()),
            EntryData::Bytes(_) => Err(Error::Checkpoint("expected numeric entry".into())),
        }
    }

    fn tag(&self) -> u8 {
        match self.data {
            EntryData::F32(_) => DType::F32.tag(),
            EntryData::F64(_) => DType::F64.tag(),
            EntryData::Bytes(_) => BYTES_TAG,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

const PARAM: &str = "param.";
const BN: &str = "bn.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

fn read_exact<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(bytes, pos, 8)?.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => f32::to_le_bytes_vec(v, &mut out),
                EntryData::F64(v) => f64::to_le_bytes_vec(v, &mut out),
                EntryData::Bytes(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic (expected PPEA1)".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch".into()));
        }
        let mut pos = MAGIC.len();
        let count = read_u32(body, &mut pos)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(body, &mut pos)? as usize;
            let name = String::from_utf8(read_exact(body, &mut pos, len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let tag = read_exact(body, &mut pos, 1)?[0];
            let rank = read_exact(body, &mut pos, 1)?[0] as usize;
            let shape = (0..rank).map(|_| read_u64(body, &mut pos).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => EntryData::F32(read_exact(body, &mut pos, n * 4)?.chunks(4).map(f32::from_le_chunk).collect()),
                1 => EntryData::F64(read_exact(body, &mut pos, n * 8)?.chunks(8).map(f64::from_le_chunk).collect()),
                BYTES_TAG => EntryData::Bytes(read_exact(body, &mut pos, n)?.to_vec()),
                t => return Err(Error::Checkpoint(format!("entry `{name}`: unknown dtype tag {t}"))),
            };
            if entries.insert(name.clone(), Entry { shape, data }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
        }
        if pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Snapshot of a model (and optionally its optimizer) after `stage`.
    pub fn from_model<F: Scalar>(model: &Model<F>, adam: Option<&AdamState<F>>, stage: u8) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, p) in model.params.iter() {
            entries.insert(format!("{PARAM}{name}"), Entry::from_values(p.tensor.shape(), p.tensor.data()));
        }
        for (name, b) in model.params.buffers() {
            let c = b.channels();
            entries.insert(format!("{BN}{name}.running_mean"), Entry::from_values(&[c], &b.running_mean));
            entries.insert(format!("{BN}{name}.running_var"), Entry::from_values(&[c], &b.running_var));
        }
        if let Some(a) = adam {
            entries.insert("adam.step".into(), Entry::scalar(a.step as f64));
            for (name, m) in &a.m {
                entries.insert(format!("{ADAM_M}{name}"), Entry::from_values(&[m.len()], m));
            }
            for (name, v) in &a.v {
                entries.insert(format!("{ADAM_V}{name}"), Entry::from_values(&[v.len()], v));
            }
        }
        let s = &model.student;
        entries.insert("student.bins".into(), Entry { shape: vec![s.bins.count()], data: EntryData::F64(s.bins.values.clone()) });
        entries.insert("student.d_min_ema".into(), Entry::scalar(s.d_min_ema));
        entries.insert("student.d_max_ema".into(), Entry::scalar(s.d_max_ema));
        entries.insert("meta.model_config".into(), Entry::bytes(serde_json::to_vec(&model.config)?));
        entries.insert("meta.stage".into(), Entry::bytes(vec![stage]));
        Ok(Self { entries })
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| Error::MissingEntries(vec![name.to_string()]))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.get(name)?.values::<f64>()?;
        v.first().copied().ok_or_else(|| Error::Checkpoint(format!("`{name}` is empty")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match &self.get("meta.model_config")?.data {
            EntryData::Bytes(b) => Ok(serde_json::from_slice(b)?),
            _ => Err(Error::Checkpoint("model config entry is not bytes".into())),
        }
    }

    pub fn stage(&self) -> Result<u8> {
        match &self.get("meta.stage")?.data {
            EntryData::Bytes(b) if b.len() == 1 => Ok(b[0]),
            _ => Err(Error::Checkpoint("bad stage entry".into())),
        }
    }

    pub fn student_state(&self) -> Result<StudentState> {
        let values = self.get("student.bins")?.values::<f64>()?;
        let (d_min, d_max) = (values[0], values[values.len() - 1]);
        Ok(StudentState {
            bins: DepthBins { d_min, d_max, values },
            d_min_ema: self.scalar("student.d_min_ema")?,
            d_max_ema: self.scalar("student.d_max_ema")?,
        })
    }

    pub fn adam_state<F: Scalar>(&self) -> Result<Option<AdamState<F>>> {
        if !self.entries.contains_key("adam.step") {
            return Ok(None);
        }
        let mut a = AdamState::new();
        a.step = self.scalar("adam.step")? as u64;
        for (name, e) in &self.entries {
            if let Some(p) = name.strip_prefix(ADAM_M) {
                a.m.insert(p.to_string(), e.values()?);
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                a.v.insert(p.to_string(), e.values()?);
            }
        }
        Ok(Some(a))
    }

    /// Copies parameters, batch-norm statistics and student state into
    /// `model`. Model entries absent from the file are an error unless they
    /// match one of `allow_missing` (they then keep their initial values);
    /// file entries the model lacks are always an error.
    pub fn load_into<F: Scalar>(&self, model: &mut Model<F>, allow_missing: &[&str]) -> Result<LoadReport> {
        let allow: Vec<Pattern> = allow_missing
            .iter()
            .map(|p| Pattern::new(p).map_err(|e| Error::Config(format!("pattern `{p}`: {e}"))))
            .collect::<Result<_>>()?;
        for name in self.entries.keys() {
            if let Some(p) = name.strip_prefix(PARAM) {
                if !model.params.contains(p) {
                    return Err(Error::UnknownParameter(p.to_string()));
                }
            } else if let Some(b) = name.strip_prefix(BN) {
                let prefix = b.trim_end_matches(".running_mean").trim_end_matches(".running_var");
                if !model.params.buffers().contains_key(prefix) {
                    return Err(Error::UnknownParameter(format!("{prefix} (batch-norm buffers)")));
                }
            }
        }
        let mut missing = Vec::new();
        let mut skipped = Vec::new();
        let mut loaded = 0;
        for (name, p) in model.params.iter_mut() {
            match self.entries.get(&format!("{PARAM}{name}")) {
                Some(e) => {
                    if e.shape != p.tensor.shape() {
                        return Err(Error::Checkpoint(format!(
                            "`{name}`: file shape {:?}, model shape {:?}",
                            e.shape,
                            p.tensor.shape()
                        )));
                    }
                    p.tensor = Tensor::new(&e.shape, e.values()?)?;
                    loaded += 1;
                }
                None if allow.iter().any(|a| a.matches(name)) => skipped.push(name.clone()),
                None => missing.push(name.clone()),
            }
        }
        for (name, b) in model.params.buffers_mut() {
            let mean = self.entries.get(&format!("{BN}{name}.running_mean"));
            let var = self.entries.get(&format!("{BN}{name}.running_var"));
            match (mean, var) {
                (Some(m), Some(v)) if m.len() == b.channels() && v.len() == b.channels() => {
                    b.running_mean = m.values()?;
                    b.running_var = v.values()?;
                }
                (Some(_), Some(_)) => return Err(Error::Checkpoint(format!("`{name}`: channel mismatch"))),
                _ if allow.iter().any(|a| a.matches(&format!("{name}.running_mean"))) => {}
                _ => missing.push(format!("{name}.running_mean")),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingEntries(missing));
        }
        model.student = self.student_state()?;
        Ok(LoadReport { loaded, kept_initial: skipped })
    }

    /// Rebuilds the model stored in this checkpoint.
    pub fn restore<F: Scalar>(&self) -> Result<Model<F>> {
        let mut model = Model::new(self.model_config()?, 0)?;
        self.load_into(&mut model, &[])?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Parameters absent from the file that kept their fresh initialization.
    pub kept_initial: Vec<String>,
}
