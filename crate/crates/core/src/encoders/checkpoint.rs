//! Binary checkpoint format.
//!
//! ```text
//! "ROVT" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 | rank: u32 | dims: u64 * rank | values: f64 * prod(dims)
//! ```
//!
//! Everything little-endian. Model hyperparameters travel as `meta.*` records
//! so a checkpoint is self-describing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{DualEncoder, PeMode, TextConfig, VitConfig};
use crate::error::{Error, Result};
use crate::pe::CpeConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ROVT";
pub const VERSION: u32 = 1;

const META_VIT: &str = "meta.vit";
const META_CPE: &str = "meta.cpe";
const META_TEXT: &str = "meta.text";

fn write_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Write the header followed by `records` in order.
pub fn write_records<W: Write>(mut out: W, records: &[(String, Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    write_u32(&mut out, VERSION)?;
    for (name, t) in records {
        let name_len = u32::try_from(name.len()).map_err(|_| Error::Format(format!("record name too long: {name}")))?;
        write_u32(&mut out, name_len)?;
        out.write_all(name.as_bytes())?;
        write_u32(&mut out, t.rank() as u32)?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parse every record. Fails on a bad header, truncation or duplicate names.
pub fn read_records<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = read_u32(&mut input, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut records: Vec<(String, Tensor)> = Vec::new();
    loop {
        let mut first = [0u8; 4];
        // a clean EOF is only allowed on a record boundary
        let n = input.read(&mut first)?;
        if n == 0 {
            break;
        }
        read_exact_or(&mut input, &mut first[n..], "record name length")?;
        let name_len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut input, &mut name, "record name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not utf-8".into()))?;
        let rank = read_u32(&mut input, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("record {name}: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact_or(&mut input, &mut b, "dims")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0 && c <= 1 << 28)
            .ok_or_else(|| Error::Format(format!("record {name}: bad shape {shape:?}")))?;
        let mut bytes = vec![0u8; count * 8];
        read_exact_or(&mut input, &mut bytes, "values")?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if records.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate record {name}")));
        }
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

fn meta(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n], values).expect("non-empty meta")
}

fn vit_meta(v: &VitConfig) -> (Tensor, Tensor) {
    let vit = meta(vec![
        v.image_size as f64,
        v.patch_size as f64,
        v.channels as f64,
        v.dim as f64,
        v.depth as f64,
        v.heads as f64,
        v.mlp_ratio as f64,
        f64::from(v.pe_mode.code()),
    ]);
    let c = &v.cpe;
    let cpe = meta(vec![
        c.upsample_size as f64,
        c.scale_range.0,
        c.scale_range.1,
        c.aspect_range.0,
        c.aspect_range.1,
        c.out_size as f64,
        c.max_rejection_attempts as f64,
    ]);
    (vit, cpe)
}

fn text_meta(t: &TextConfig) -> Tensor {
    meta(
        [t.vocab_size, t.max_len, t.dim, t.depth, t.heads, t.mlp_ratio]
            .iter()
            .map(|&x| x as f64)
            .collect(),
    )
}

fn meta_usize(values: &[f64], i: usize, what: &str) -> Result<usize> {
    let v = values[i];
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::Format(format!("{what}: {v} is not a count")));
    }
    Ok(v as usize)
}

fn take_meta(map: &mut BTreeMap<String, Tensor>, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = map.remove(name).ok_or_else(|| Error::Format(format!("checkpoint has no {name} record")))?;
    if t.numel() != len {
        return Err(Error::Format(format!("{name} has {} values, expected {len}", t.numel())));
    }
    Ok(t.into_data())
}

impl DualEncoder {
    /// Meta records followed by every parameter in store order.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let (vit, cpe) = vit_meta(&self.vit);
        let mut records = vec![
            (META_VIT.to_string(), vit),
            (META_CPE.to_string(), cpe),
            (META_TEXT.to_string(), text_meta(&self.text)),
        ];
        records.extend(self.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())));
        records
    }

    pub fn from_records(records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = records.into_iter().collect();
        let v = take_meta(&mut map, META_VIT, 8)?;
        let c = take_meta(&mut map, META_CPE, 7)?;
        let t = take_meta(&mut map, META_TEXT, 6)?;
        let u = |vals: &[f64], i: usize| meta_usize(vals, i, "model meta");
        let vit = VitConfig {
            image_size: u(&v, 0)?,
            patch_size: u(&v, 1)?,
            channels: u(&v, 2)?,
            dim: u(&v, 3)?,
            depth: u(&v, 4)?,
            heads: u(&v, 5)?,
            mlp_ratio: u(&v, 6)?,
            pe_mode: PeMode::from_code(u(&v, 7)? as u32)?,
            cpe: CpeConfig {
                upsample_size: u(&c, 0)?,
                scale_range: (c[1], c[2]),
                aspect_range: (c[3], c[4]),
                out_size: u(&c, 5)?,
                max_rejection_attempts: u(&c, 6)?,
            },
        };
        let text = TextConfig {
            vocab_size: u(&t, 0)?,
            max_len: u(&t, 1)?,
            dim: u(&t, 2)?,
            depth: u(&t, 3)?,
            heads: u(&t, 4)?,
            mlp_ratio: u(&t, 5)?,
        };
        let mut model = DualEncoder::new(vit, text, 0).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        for p in model.params.iter_mut() {
            let t = map.remove(&p.name).ok_or_else(|| Error::Format(format!("checkpoint is missing {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected checkpoint record {extra}")));
        }
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        write_records(out, &self.to_records())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        Self::from_records(read_records(input)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
