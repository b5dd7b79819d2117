//! Binary checkpoint format.
//!
//! ```text
//! "FARC" | version u32 | variant u8 | precision u8 | 9 × u64 geometry
//! | tensor count u64 | tensors... | CRC-32 u32
//! tensor: name_len u32 | name | rank u32 | dims u64... | dtype u8 | payload
//! ```
//!
//! Everything is little-endian. dtype tags: 0 = f32, 1 = f64, 2 = u8.
//! Retention masks are stored as u8 tensors named `mask.{layer}.{head}.{dir}`.

use std::path::Path;

use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::config::{ModelConfig, Precision, Variant};
use crate::error::{Error, Result};
use crate::mask::{Direction, MaskSet, PruneMask};
use crate::model::{Init, Model};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"FARC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian payload, `numel · dtype.size()` bytes.
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<F: Real>(name: &str, t: &Tensor<F>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * F::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.to_string(),
            dtype: F::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        if self.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {:?}, expected {:?}",
                self.name,
                self.dtype,
                F::DTYPE
            )));
        }
        let data = self.bytes.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }

    fn from_mask(name: String, m: &PruneMask) -> Self {
        Self {
            name,
            dtype: DType::U8,
            shape: vec![m.units()],
            bytes: m.keep.iter().map(|&k| k as u8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub variant: Variant,
    pub tensors: Vec<RawTensor>,
}

fn mask_name(l: usize, h: usize, d: Direction) -> String {
    format!("mask.{l}.{h}.{}", d.name())
}

fn geometry(c: &ModelConfig) -> [usize; 9] {
    [
        c.layers,
        c.dim,
        c.heads,
        c.head_dim,
        c.mlp_ratio,
        c.patch_size,
        c.image_size,
        c.channels,
        c.num_classes,
    ]
}

impl Checkpoint {
    pub fn from_model<F: Real>(model: &Model<F>) -> Self {
        let mut tensors: Vec<RawTensor> = model
            .store
            .iter()
            .map(|(_, name, t)| RawTensor::from_tensor(name, t))
            .collect();
        if let Some(masks) = model.masks() {
            tensors.extend(masks.iter().map(|(l, h, d, m)| RawTensor::from_mask(mask_name(l, h, d), m)));
        }
        Self {
            config: model.config,
            variant: model.variant,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.variant.tag());
        w.u8(match self.config.precision {
            Precision::F32 => 0,
            Precision::F64 => 1,
        });
        for v in geometry(&self.config) {
            w.u64(v as u64);
        }
        w.u64(self.tensors.len() as u64);
        for t in &self.tensors {
            w.str(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.u8(t.dtype.tag());
            w.bytes(&t.bytes);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing FARC magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is newer than supported version {FORMAT_VERSION}"
            )));
        }
        if version == 0 {
            return Err(Error::Checkpoint("format version 0 is invalid".into()));
        }
        let mut r = ByteReader::checked(bytes, "checkpoint")?;
        r.take(8)?;
        let variant = Variant::from_tag(r.u8()?)
            .ok_or_else(|| Error::Checkpoint("unknown variant tag".into()))?;
        let precision = match r.u8()? {
            0 => Precision::F32,
            1 => Precision::F64,
            t => return Err(Error::Checkpoint(format!("unknown precision tag {t}"))),
        };
        let mut g = [0usize; 9];
        for v in &mut g {
            *v = r.usize()?;
        }
        let config = ModelConfig {
            layers: g[0],
            dim: g[1],
            heads: g[2],
            head_dim: g[3],
            mlp_ratio: g[4],
            patch_size: g[5],
            image_size: g[6],
            channels: g[7],
            num_classes: g[8],
            precision,
        };
        let count = r.usize()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.usize()?);
            }
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: unknown dtype tag {tag}")))?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?;
            let bytes = r.take(numel)?.to_vec();
            tensors.push(RawTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if !r.is_done() {
            return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
        }
        Ok(Self {
            config,
            variant,
            tensors,
        })
    }

    /// Rebuilds the model. An empty tensor table gives a zero-initialized
    /// shell of the stored geometry. Substitute tensors may differ in shape
    /// from the nominal geometry (physically shrunk models); any other shape
    /// change is an error.
    pub fn into_model<F: Real>(self) -> Result<Model<F>> {
        let mut model = Model::<F>::new(self.config, self.variant, Init::Zeros)?;
        if self.tensors.is_empty() {
            return Ok(model);
        }
        let mut masks = MaskSet { masks: Vec::new() };
        let mut seen = vec![false; model.store.len()];
        let mut any_mask = false;
        for raw in &self.tensors {
            if let Some(rest) = raw.name.strip_prefix("mask.") {
                any_mask = true;
                set_mask(&mut masks, rest, raw)?;
                continue;
            }
            let id = model
                .store
                .find(&raw.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", raw.name)))?;
            let t = raw.to_tensor::<F>()?;
            if t.shape() != model.store.get(id).shape() && !raw.name.starts_with("far.") {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    raw.name,
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = model.store.ids().nth(i).map(|id| model.store.name(id).to_string());
            return Err(Error::Checkpoint(format!("missing tensor {}", name.unwrap_or_default())));
        }
        if any_mask {
            model
                .set_masks(Some(masks))
                .map_err(|e| Error::Checkpoint(format!("stored masks: {e}")))?;
        }
        Ok(model)
    }
}

fn set_mask(masks: &mut MaskSet, rest: &str, raw: &RawTensor) -> Result<()> {
    let bad = || Error::Checkpoint(format!("malformed mask tensor {}", raw.name));
    let parts: Vec<&str> = rest.split('.').collect();
    let [l, h, d] = parts.as_slice() else {
        return Err(bad());
    };
    let l: usize = l.parse().map_err(|_| bad())?;
    let h: usize = h.parse().map_err(|_| bad())?;
    let d = match *d {
        "fwd" => Direction::Forward,
        "rev" => Direction::Reverse,
        _ => return Err(bad()),
    };
    if raw.dtype != DType::U8 || raw.shape.len() != 1 || raw.bytes.iter().any(|&b| b > 1) {
        return Err(bad());
    }
    while masks.masks.len() <= l {
        masks.masks.push(Vec::new());
    }
    let heads = &mut masks.masks[l];
    while heads.len() <= h {
        heads.push([PruneMask::full(0), PruneMask::full(0)]);
    }
    heads[h][d.index()] = PruneMask {
        keep: raw.bytes.iter().map(|&b| b == 1).collect(),
    };
    Ok(())
}

pub fn save_checkpoint<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model).to_bytes())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Model<F>> {
    Checkpoint::from_bytes(&read_file(path)?)?.into_model()
}
