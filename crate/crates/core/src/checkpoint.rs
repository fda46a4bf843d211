//! Named-tensor binary container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PPLS" | u32 version | u32 tensor count | u32 config length | config JSON
//! per tensor: u16 name length | name | u8 dtype | u8 rank | u32 dims[rank]
//!             | zero padding to a 64-byte file offset | raw data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::Sgd;

pub const MAGIC: &[u8; 4] = b"PPLS";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
/// Names under this prefix hold optimizer state and are ignored by model loads.
pub const OPTIMIZER_PREFIX: &str = "optimizer.";
const VELOCITY_PREFIX: &str = "optimizer.velocity.";

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    /// Model configuration echoed as JSON; empty when absent.
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Every parameter and running statistic of `model`.
    pub fn from_model(model: &Model<T>) -> Self {
        Checkpoint {
            config: model.config.to_json(),
            tensors: model.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn with_optimizer(mut self, optimizer: &Sgd<T>, params: &ParamStore<T>) -> Self {
        self.tensors.extend(optimizer.state(params));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.config.is_empty() {
            return Err(Error::CheckpointCorrupt("no model configuration stored".into()));
        }
        ModelConfig::from_json(&self.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| too_big("tensor count"))?.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.config.len()).map_err(|_| too_big("config"))?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.push(u8::try_from(t.rank()).map_err(|_| too_big("rank"))?);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("extent"))?.to_le_bytes());
            }
            out.resize(out.len().next_multiple_of(ALIGN), 0);
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint);
        }
        r.pos = 4;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let count = r.u32("tensor count")? as usize;
        let config_len = r.u32("config length")? as usize;
        let config = String::from_utf8(r.take(config_len, "config")?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt("config is not UTF-8".into()))?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?;
            let code = r.take(1, "dtype")?[0];
            let dtype =
                DType::from_code(code).ok_or_else(|| Error::CheckpointCorrupt(format!("unknown dtype code {code}")))?;
            if dtype != T::DTYPE {
                return Err(Error::DTypeMismatch { found: dtype, expected: T::DTYPE });
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = numel
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor `{name}` is too large")))?;
            let pad = r.pos.next_multiple_of(ALIGN) - r.pos;
            if r.take(pad, "padding")?.iter().any(|&b| b != 0) {
                return Err(Error::CheckpointCorrupt(format!("nonzero padding before `{name}`")));
            }
            let raw = r.take(nbytes, "tensor data")?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn too_big(what: &str) -> Error {
    Error::CheckpointCorrupt(format!("{what} does not fit the format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::CheckpointTruncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Model<T> {
    /// Overwrites every parameter from `ckpt`. Names must match one to one
    /// (optimizer entries aside) and shapes must agree; on error the model
    /// is unchanged.
    pub fn load_state(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        let mut staged = Vec::with_capacity(self.params.len());
        let mut seen = vec![false; self.params.len()];
        for (name, t) in &ckpt.tensors {
            if name.starts_with(OPTIMIZER_PREFIX) {
                continue;
            }
            let id = self.params.find(name).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            let expected = self.params.value(id).shape();
            if t.shape() != expected {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            seen[id] = true;
            staged.push((id, t.clone()));
        }
        if let Some(id) = seen.iter().position(|&s| !s) {
            return Err(Error::MissingTensor(self.params.get(id).name.clone()));
        }
        for (id, t) in staged {
            self.params.set(id, t)?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config, then loads weights.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut model = Model::build(&ckpt.model_config()?, 0)?;
        model.load_state(ckpt)?;
        Ok(model)
    }
}

impl<T: Scalar> Sgd<T> {
    /// Restores velocity buffers saved by [`Checkpoint::with_optimizer`].
    pub fn load_state(&mut self, ckpt: &Checkpoint<T>, params: &ParamStore<T>) -> Result<()> {
        for (name, t) in &ckpt.tensors {
            let Some(param) = name.strip_prefix(VELOCITY_PREFIX) else { continue };
            let id = params.find(param).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            if t.shape() != params.value(id).shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: params.value(id).shape().to_vec(),
                });
            }
            self.set_velocity(id, t.to_vec());
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::build(&ModelConfig::tiny(4), 3).unwrap()
    }

    #[test]
    fn data_sections_are_aligned() {
        let ckpt = Checkpoint::from_model(&tiny());
        let bytes = ckpt.to_bytes().unwrap();
        // The first tensor's data begins at the first aligned offset after its header.
        let header = 16 + ckpt.config.len();
        let (name, t) = &ckpt.tensors[0];
        let data_start = (header + 2 + name.len() + 2 + 4 * t.rank()).next_multiple_of(ALIGN);
        assert_eq!(f32::read_le(&bytes[data_start..data_start + 4]), t.data()[0]);
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = Checkpoint::from_model(&tiny()).to_bytes().unwrap();
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"PNG!...."), Err(Error::NotACheckpoint)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&v2), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CheckpointTruncated(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::DTypeMismatch { .. })));
    }

    #[test]
    fn renamed_tensor_is_unknown() {
        let mut ckpt = Checkpoint::from_model(&tiny());
        ckpt.tensors[0].0 = "encoder.bogus.weight".into();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert!(matches!(tiny().load_state(&back), Err(Error::UnknownTensor(_))));
        let mut partial = Checkpoint::from_model(&tiny());
        partial.tensors.pop();
        assert!(matches!(tiny().load_state(&partial), Err(Error::MissingTensor(_))));
    }
}
