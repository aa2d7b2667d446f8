//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "OCBNMODL"
//! version      u32
//! id length    u32
//! id           utf-8    "<architecture>/<head>", e.g. "cnn-ref/logsoftmax-2"
//! seed         u32
//! final metric f64      test accuracy recorded at save time
//! param count  u64
//! payload      f32 x param count
//! ```

use std::fs;
use std::path::Path;

use super::zoo::{Architecture, GradModel, Head};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OCBNMODL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: Architecture,
    pub head: Head,
    pub seed: u32,
    pub final_metric: f64,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &GradModel<f32>, seed: u32, final_metric: f64) -> Self {
        Checkpoint {
            version: VERSION,
            arch: model.arch(),
            head: model.head(),
            seed,
            final_metric,
            params: model
                .params()
                .iter()
                .flat_map(|p| p.data().iter().copied())
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<GradModel<f32>> {
        let shapes = self.arch.param_shapes(self.head.outputs());
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if expected != self.params.len() {
            return Err(Error::CorruptPayload(format!(
                "{} parameters for {}/{}, expected {expected}",
                self.params.len(),
                self.arch,
                self.head
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::from_slice(shape, &self.params[offset..offset + n])?);
            offset += n;
        }
        GradModel::from_params(self.arch, self.head, tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = format!("{}/{}", self.arch, self.head);
        let mut out = Vec::with_capacity(40 + id.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.final_metric.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptPayload("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::CorruptPayload("architecture id is not utf-8".into()))?;
        let (arch, head) = id
            .split_once('/')
            .ok_or_else(|| Error::CorruptPayload(format!("malformed architecture id '{id}'")))?;
        let arch: Architecture = arch.parse()?;
        let head: Head = head.parse()?;
        let seed = r.u32()?;
        let final_metric = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let payload = &bytes[r.pos..];
        if Some(payload.len()) != count.checked_mul(4) {
            return Err(Error::CorruptPayload(format!(
                "payload holds {} bytes, header promises {count} f32 values",
                payload.len()
            )));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Checkpoint {
            version,
            arch,
            head,
            seed,
            final_metric,
            params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptPayload("file ends inside the header".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
