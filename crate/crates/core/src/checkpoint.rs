//! Binary checkpoints and plain tensor files.
//!
//! All integers and scalars are little-endian. A checkpoint is
//!
//! ```text
//! "MANETCKP" u32 version u32 scalar_bytes
//! u64 config_len  config JSON
//! u64 epoch  u64 step
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u32 tensor count, tensors
//! u8 optimizer flag [f64 lr  u64 step  first moments  second moments]
//! ```
//!
//! where a tensor is `u32 name_len, name, u32 ndim, u64 dims.., data` and
//! moments repeat the tensor data in parameter order without names or shapes.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MANETCKP";
pub const TENSOR_FILE_MAGIC: &[u8; 8] = b"MANETPRM";
pub const FORMAT_VERSION: u32 = 1;

/// Complete position of a ChaCha generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub step: u64,
    /// Moments aligned with [`Checkpoint::params`].
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Effective training configuration.
    pub config: serde_json::Value,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<OptimizerState<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_data<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_data(out, t);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn data<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        ensure!(ndim <= 8, Format, "tensor {name} has {ndim} dimensions");
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let data = self.data(n)?;
        Ok((name, Tensor::from_vec(&shape, data)?))
    }

    fn header(&mut self, magic: &[u8; 8], what: &str) -> Result<u32> {
        ensure!(self.take(8)? == magic, Format, "not a {what} file");
        let version = self.u32()?;
        ensure!(version == FORMAT_VERSION, Format, "{what} format version {version}, expected {FORMAT_VERSION}");
        Ok(version)
    }

    fn scalar_tag<T: Scalar>(&mut self) -> Result<()> {
        let bytes = self.u32()? as usize;
        ensure!(bytes == T::BYTES, Format, "stored {bytes}-byte scalars, expected {}-byte", T::BYTES);
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        ensure!(self.pos == self.buf.len(), Format, "{} trailing bytes", self.buf.len() - self.pos);
        Ok(())
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, T::BYTES as u32);
        let json = serde_json::to_vec(&self.config)?;
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_tensor(&mut out, name, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                ensure!(
                    o.m.len() == self.params.len() && o.v.len() == self.params.len(),
                    Contract,
                    "optimizer moments do not match the parameters"
                );
                out.push(1);
                out.extend_from_slice(&o.lr.to_le_bytes());
                put_u64(&mut out, o.step);
                for t in o.m.iter().chain(&o.v) {
                    put_data(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.header(CHECKPOINT_MAGIC, "checkpoint")?;
        r.scalar_tag::<T>()?;
        let len = r.u64()? as usize;
        let config = serde_json::from_slice(r.take(len)?)?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            params.push(r.tensor()?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let lr = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let ostep = r.u64()?;
                let moments = |r: &mut Reader| -> Result<Vec<Tensor<T>>> {
                    params.iter().map(|(_, p)| Tensor::from_vec(p.shape(), r.data(p.len())?)).collect()
                };
                let m = moments(&mut r)?;
                let v = moments(&mut r)?;
                Some(OptimizerState { lr, step: ostep, m, v })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        r.finish()?;
        Ok(Checkpoint { config, epoch, step, rng: RngState { seed, stream, word_pos }, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Named `f32` tensors, e.g. converted pretrained weights.
pub fn write_tensor_file(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_FILE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, 4);
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_tensor(&mut out, name, t);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    r.header(TENSOR_FILE_MAGIC, "tensor")?;
    r.scalar_tag::<f32>()?;
    let count = r.u32()? as usize;
    let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(tensors)
}
