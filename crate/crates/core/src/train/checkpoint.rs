//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "MALC" | version u32 | name_len u16 | name | scale f64
//! tensor_count u32 | tensor records...
//! extra_count u32  | extra records...        (optimizer and loop state)
//! crc32 u32 of every preceding byte
//!
//! record: name_len u16 | name | dtype u8 (0=f32, 1=f64) | rank u8 | extents u32 * rank | raw data
//! ```
//!
//! The extra section holds `adam/step`, `adam/m/<param>`, `adam/v/<param>`,
//! `train/epoch`, the dropout generator (`rng/seed`, `rng/stream`, `rng/word_pos`
//! as 32-bit limbs stored in f64) and `meta/input_shape`, `meta/head_only_trainable`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Model;
use crate::tensor::{DType, Real, Tensor};

use super::{OptimizerState, Trainer};

pub const MAGIC: &[u8; 4] = b"MALC";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor as stored on disk, in either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, refusing precision changes.
    pub fn to_tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::config(format!(
                "{name}: stored as {:?}, model uses {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }

    fn f64_values(&self) -> Vec<f64> {
        match self {
            StoredTensor::F32(t) => t.to_f64_vec(),
            StoredTensor::F64(t) => t.to_f64_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model_name: String,
    pub scale: f64,
    /// Parameters then state buffers, in graph order.
    pub tensors: Vec<(String, StoredTensor)>,
    /// Optimizer moments and loop state.
    pub extra: Vec<(String, StoredTensor)>,
}

fn scalar(v: f64) -> StoredTensor {
    StoredTensor::F64(Tensor::from_parts(vec![1], vec![v]))
}

fn limbs(bytes: &[u8]) -> StoredTensor {
    let values: Vec<f64> = bytes
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte limb")) as f64)
        .collect();
    StoredTensor::F64(Tensor::from_parts(vec![values.len()], values))
}

fn from_limbs(t: &StoredTensor, name: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for v in t.f64_values() {
        if !(0.0..=u32::MAX as f64).contains(&v) || v.fract() != 0.0 {
            return Err(Error::config(format!("{name}: invalid limb {v}")));
        }
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    Ok(out)
}

/// Loop state restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Restored<T: Real> {
    pub optimizer: OptimizerState<T>,
    pub epoch: u64,
    pub dropout_rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Captures the model, optimizer moments, epoch count and dropout stream.
    pub fn capture<T: Real>(model: &Model<T>, trainer: &Trainer<T>) -> Self {
        let tensors = model
            .named_params()
            .map(|(n, t, _)| (n, StoredTensor::from_tensor(t)))
            .chain(
                model
                    .named_state()
                    .map(|(n, t)| (n, StoredTensor::from_tensor(t))),
            )
            .collect();
        let mut extra = vec![(
            "adam/step".to_string(),
            scalar(trainer.optimizer.step as f64),
        )];
        for (name, (m, v)) in &trainer.optimizer.moments {
            extra.push((format!("adam/m/{name}"), StoredTensor::from_tensor(m)));
            extra.push((format!("adam/v/{name}"), StoredTensor::from_tensor(v)));
        }
        extra.push(("train/epoch".to_string(), scalar(trainer.epoch as f64)));
        let rng = &trainer.dropout_rng;
        extra.push(("rng/seed".to_string(), limbs(&rng.get_seed())));
        extra.push((
            "rng/stream".to_string(),
            limbs(&rng.get_stream().to_le_bytes()),
        ));
        extra.push((
            "rng/word_pos".to_string(),
            limbs(&rng.get_word_pos().to_le_bytes()),
        ));
        let shape: Vec<f64> = model.input_shape.iter().map(|&v| v as f64).collect();
        extra.push((
            "meta/input_shape".to_string(),
            StoredTensor::F64(Tensor::from_parts(vec![shape.len()], shape)),
        ));
        extra.push((
            "meta/head_only_trainable".to_string(),
            scalar(if model.head_only_trainable { 1.0 } else { 0.0 }),
        ));
        Checkpoint {
            version: FORMAT_VERSION,
            model_name: model.name.clone(),
            scale: model.scale,
            tensors,
            extra,
        }
    }

    fn extra(&self, name: &str) -> Result<&StoredTensor> {
        self.extra
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("checkpoint lacks {name}")))
    }

    pub fn input_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .extra("meta/input_shape")?
            .f64_values()
            .into_iter()
            .map(|v| v as usize)
            .collect())
    }

    pub fn head_only_trainable(&self) -> Result<bool> {
        Ok(self.extra("meta/head_only_trainable")?.f64_values()[0] != 0.0)
    }

    /// Loads every tensor into `model` (which must have the same architecture)
    /// and rebuilds the optimizer and loop state.
    pub fn restore<T: Real>(&self, model: &mut Model<T>) -> Result<Restored<T>> {
        if model.name != self.model_name {
            return Err(Error::config(format!(
                "checkpoint holds {}, model is {}",
                self.model_name, model.name
            )));
        }
        let expected = model.tensor_names();
        if expected.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, t) in &self.tensors {
            model.set_tensor(name, t.to_tensor(name)?)?;
        }
        let mut optimizer = OptimizerState::new();
        optimizer.step = self.extra("adam/step")?.f64_values()[0] as u64;
        for (name, t) in &self.extra {
            if let Some(param) = name.strip_prefix("adam/m/") {
                let v = self.extra(&format!("adam/v/{param}"))?;
                optimizer
                    .moments
                    .insert(param.to_string(), (t.to_tensor(name)?, v.to_tensor(name)?));
            }
        }
        let epoch = self.extra("train/epoch")?.f64_values()[0] as u64;
        let seed: [u8; 32] = from_limbs(self.extra("rng/seed")?, "rng/seed")?
            .try_into()
            .map_err(|_| Error::config("rng/seed must hold 8 limbs"))?;
        let stream = u64::from_le_bytes(
            from_limbs(self.extra("rng/stream")?, "rng/stream")?
                .try_into()
                .map_err(|_| Error::config("rng/stream must hold 2 limbs"))?,
        );
        let word_pos = u128::from_le_bytes(
            from_limbs(self.extra("rng/word_pos")?, "rng/word_pos")?
                .try_into()
                .map_err(|_| Error::config("rng/word_pos must hold 4 limbs"))?,
        );
        let mut dropout_rng = ChaCha8Rng::from_seed(seed);
        dropout_rng.set_stream(stream);
        dropout_rng.set_word_pos(word_pos);
        model.scale = self.scale;
        model.head_only_trainable = self.head_only_trainable()?;
        Ok(Restored {
            optimizer,
            epoch,
            dropout_rng,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        write_name(&mut out, &self.model_name);
        out.extend_from_slice(&self.scale.to_le_bytes());
        for section in [&self.tensors, &self.extra] {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for (name, t) in section {
                write_record(&mut out, name, t);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let model_name = r.name()?;
        let scale = f64::from_le_bytes(r.take(8, "scale")?.try_into().expect("8 bytes"));
        let tensors = r.section()?;
        let extra = r.section()?;
        let body_end = r.pos;
        let stored = r.u32("crc32")?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Format {
                offset: body_end as u64,
                message: format!("crc mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        Ok(Checkpoint {
            version,
            model_name,
            scale,
            tensors,
            extra,
        })
    }

    /// Writes to a temporary sibling then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    let bytes = name.as_bytes();
    let len = u16::try_from(bytes.len()).expect("names are shorter than 64 KiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &StoredTensor) {
    write_name(out, name);
    out.push(t.dtype().code());
    out.push(u8::try_from(t.shape().len()).expect("rank fits in u8"));
    for &e in t.shape() {
        out.extend_from_slice(&u32::try_from(e).expect("extent fits in u32").to_le_bytes());
    }
    match t {
        StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
        StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated: {what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn name(&mut self) -> Result<String> {
        let len =
            u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let at = self.pos;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "name is not UTF-8".to_string(),
        })
    }

    fn section(&mut self) -> Result<Vec<(String, StoredTensor)>> {
        let count = self.u32("record count")?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.name()?;
            let at = self.pos;
            let dtype =
                DType::from_code(self.take(1, "dtype")?[0]).ok_or_else(|| Error::Format {
                    offset: at as u64,
                    message: format!("{name}: unknown dtype"),
                })?;
            let rank = self.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("extent")? as usize);
            }
            let n = crate::tensor::check_shape(&shape).map_err(|e| Error::Format {
                offset: at as u64,
                message: format!("{name}: {e}"),
            })?;
            let width = dtype.size_in_bytes();
            let raw = self.take(n * width, "tensor data")?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::from_parts(
                    shape,
                    raw.chunks(4).map(f32::read_le).collect(),
                )),
                DType::F64 => StoredTensor::F64(Tensor::from_parts(
                    shape,
                    raw.chunks(8).map(f64::read_le).collect(),
                )),
            };
            out.push((name, t));
        }
        Ok(out)
    }
}

/// Captures and atomically writes a checkpoint.
pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, trainer: &Trainer<T>) -> Result<()> {
    Checkpoint::capture(model, trainer).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
