//! Binary checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "S2S1" | version u32 | entry count u32
//! per entry: name_len u32 | name bytes | dtype u8 | ndim u32 | dims u64 * ndim
//! payload: every entry's data, in header order
//! footer: step u64 | adam_t u64 | val_loss f64 | val_ppl f64 | val_bleu f64
//!         | config sha256 (32 bytes) | "S2S1"
//! ```
//!
//! Optimizer moments are stored as entries named `adam.m/<param>` and
//! `adam.v/<param>`. Missing metrics are written as NaN.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"S2S1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub val_loss: Option<f64>,
    pub val_ppl: Option<f64>,
    pub val_bleu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub adam: Option<Adam<T>>,
    pub step: u64,
    pub metrics: Metrics,
    pub config_digest: [u8; 32],
}

struct Entry<'a, T> {
    name: String,
    tensor: &'a Tensor<T>,
}

pub fn save<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut entries: Vec<Entry<T>> = ckpt
        .params
        .iter()
        .map(|(_, p)| Entry {
            name: p.name.clone(),
            tensor: &p.value,
        })
        .collect();
    if let Some(adam) = &ckpt.adam {
        let names: Vec<&str> = ckpt.params.iter().map(|(_, p)| p.name.as_str()).collect();
        for (prefix, moments) in [("adam.m/", &adam.m), ("adam.v/", &adam.v)] {
            for (name, t) in names.iter().zip(moments) {
                entries.push(Entry {
                    name: format!("{prefix}{name}"),
                    tensor: t,
                });
            }
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for e in &entries {
        for &v in e.tensor.data() {
            v.write_le(&mut buf);
        }
    }
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.adam.as_ref().map_or(0, |a| a.t).to_le_bytes());
    let m = ckpt.metrics;
    for v in [m.val_loss, m.val_ppl, m.val_bleu] {
        buf.extend_from_slice(&v.unwrap_or(f64::NAN).to_le_bytes());
    }
    buf.extend_from_slice(&ckpt.config_digest);
    buf.extend_from_slice(MAGIC);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Load a checkpoint, converting stored values to `T` if their precision
/// differs. The Adam hyperparameters are not stored; pass the ones to resume
/// with.
pub fn load<T: Real>(path: &Path, adam_config: AdamConfig) -> Result<Checkpoint<T>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        header.push((name, dtype, shape));
    }
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, dtype, shape) in header {
        let n: usize = shape.iter().product();
        let bytes = r.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c).as_f64())).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        let tensor = Tensor::new(&shape, data)?;
        if name.starts_with("adam.m/") {
            m.push(tensor);
        } else if name.starts_with("adam.v/") {
            v.push(tensor);
        } else {
            params.add(name, tensor)?;
        }
    }
    let step = r.u64()?;
    let adam_t = r.u64()?;
    let metric = |x: f64| if x.is_nan() { None } else { Some(x) };
    let metrics = Metrics {
        val_loss: metric(r.f64()?),
        val_ppl: metric(r.f64()?),
        val_bleu: metric(r.f64()?),
    };
    let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if r.take(4)? != MAGIC || r.pos != buf.len() {
        return Err(Error::Checkpoint("bad footer".into()));
    }
    let adam = if m.is_empty() && v.is_empty() {
        None
    } else if m.len() == params.len() && v.len() == params.len() {
        Some(Adam {
            config: adam_config,
            m,
            v,
            t: adam_t,
        })
    } else {
        return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
    };
    Ok(Checkpoint {
        params,
        adam,
        step,
        metrics,
        config_digest,
    })
}
