//! `.cckp` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CCKP"  u32 version(=1)  u32 tensor_count
//! tensor_count x { u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dim,
//!                  u8 dtype (0 = f32, 1 = f64), payload (row-major) }
//! optional: "OPT1" u32 tensor_count, tensor records as above, u64 step
//! ```

use std::path::Path;

use super::ParamRegistry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "cckp";
const MAGIC: &[u8; 4] = b"CCKP";
const OPT_MAGIC: &[u8; 4] = b"OPT1";

/// Optimizer moments stored next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<OptimizerSnapshot<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_registry(reg: &ParamRegistry<T>, optimizer: Option<OptimizerSnapshot<T>>) -> Self {
        let tensors = reg
            .iter()
            .map(|(name, p)| {
                let t = Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).expect("valid");
                (name.to_string(), t)
            })
            .collect();
        Self { tensors, optimizer }
    }

    /// Loads every parameter of `reg` from this checkpoint.
    pub fn restore(&self, reg: &mut ParamRegistry<T>) -> Result<()> {
        reg.load_values(self.tensors.iter().map(|(k, t)| (k.as_str(), t)))
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE_TAG);
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        put_tensor(&mut out, name, t);
    }
    if let Some(opt) = &ckpt.optimizer {
        out.extend_from_slice(OPT_MAGIC);
        out.extend_from_slice(&(opt.tensors.len() as u32).to_le_bytes());
        for (name, t) in &opt.tensors {
            put_tensor(&mut out, name, t);
        }
        out.extend_from_slice(&opt.step.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes for {what}, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let start = self.pos;
        let len = self.u16("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Format {
                what: "checkpoint",
                offset: start + 2,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = self.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("dimension")? as usize);
        }
        if ndim == 0 || shape.contains(&0) {
            return Err(self.fail(format!("tensor `{name}` has invalid shape {shape:?}")));
        }
        let tag_pos = self.pos;
        let tag = self.u8("dtype")?;
        if tag != T::DTYPE_TAG {
            return Err(Error::Format {
                what: "checkpoint",
                offset: tag_pos,
                msg: format!(
                    "tensor `{name}` has dtype tag {tag}, expected {}",
                    T::DTYPE_TAG
                ),
            });
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.fail("tensor size overflows"))?;
        let payload = self.take(numel * T::BYTES, "payload")?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 0,
            msg: "bad magic, expected \"CCKP\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let optimizer = if r.pos == bytes.len() {
        None
    } else {
        if r.take(4, "optimizer tag")? != OPT_MAGIC {
            return Err(Error::Format {
                what: "checkpoint",
                offset: r.pos - 4,
                msg: "expected \"OPT1\" trailer or end of file".into(),
            });
        }
        let count = r.u32("optimizer tensor count")?;
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let step = r.u64("optimizer step")?;
        Some(OptimizerSnapshot { tensors, step })
    };
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { tensors, optimizer })
}

pub fn save_checkpoint<T: Scalar>(
    reg: &ParamRegistry<T>,
    optimizer: Option<OptimizerSnapshot<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(&Checkpoint::from_registry(reg, optimizer));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
