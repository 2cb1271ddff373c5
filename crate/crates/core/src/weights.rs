//! DLWT named-tensor container and network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DLWT" | version u32 = 1 | tensor_count u32
//! per tensor: name_len u32 | name (UTF-8) | dtype u8 (0 = f32) | ndim u8 | dims u64 × ndim | f32 payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::menet::{layer_dims, MeNetParams, LAYER_NAMES};

pub const MAGIC: &[u8; 4] = b"DLWT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const STEP_TENSOR: &str = "meta.step";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn dims_string(&self) -> String {
        if self.dims.is_empty() {
            return "scalar".into();
        }
        self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<NamedTensor>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: Vec<f32>) -> Result<()> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "tensor `{name}` declares {expected} values but holds {}",
                data.len()
            )));
        }
        if self.get(name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// The payload of `name`, which must have exactly `dims`.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))?;
        if t.dims.len() != dims.len() || t.dims.iter().zip(dims).any(|(&a, &b)| a != b as u64) {
            let want = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            return Err(Error::Schema(format!(
                "tensor `{name}` has shape {}, expected {want}",
                t.dims_string()
            )));
        }
        Ok(&t.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| 4 * t.data.len() + 8 * t.dims.len() + t.name.len() + 6)
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a DLWT file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported DLWT version {version}")));
        }
        let count = r.u32()? as usize;
        let mut file = WeightFile::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()?);
            }
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            file.tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Writes through a sibling temporary file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        fs::write(tmp, self.to_bytes()).map_err(|e| Error::io(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| Error::Format(format!("truncated file: wanted {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Checkpoint tensors: `{layer}.weight`, `{layer}.bias` per layer, plus `meta.step` when given.
pub fn params_to_weight_file(params: &MeNetParams<f32>, step: Option<u64>) -> WeightFile {
    let mut file = WeightFile::new();
    for (name, layer) in params.layers() {
        file.push(&format!("{name}.weight"), &layer.weight_dims(), layer.weight.clone())
            .expect("layer buffers are consistent");
        file.push(&format!("{name}.bias"), &[layer.out_channels], layer.bias.clone())
            .expect("layer buffers are consistent");
    }
    if let Some(step) = step {
        file.push(STEP_TENSOR, &[], vec![step as f32]).expect("scalar");
    }
    file
}

/// Validates names and shapes against the network wiring; the iteration count
/// is taken from `head_e.weight`.
pub fn params_from_weight_file(file: &WeightFile) -> Result<MeNetParams<f32>> {
    let head = file
        .get("head_e.weight")
        .ok_or_else(|| Error::Schema("missing tensor `head_e.weight`".into()))?;
    let iterations = match head.dims.first() {
        Some(&d) if d >= 1 && head.dims.len() == 4 => d as usize,
        _ => {
            return Err(Error::Schema(format!(
                "tensor `head_e.weight` has shape {}, expected Ix64x3x3",
                head.dims_string()
            )))
        }
    };
    let dims = layer_dims(iterations);
    let mut params = MeNetParams::<f32>::zeros(iterations);
    for ((name, layer), (o, i)) in params.layers_mut().into_iter().zip(dims) {
        assert!(LAYER_NAMES.contains(&name));
        layer
            .weight
            .copy_from_slice(file.require(&format!("{name}.weight"), &[o, i, 3, 3])?);
        layer.bias.copy_from_slice(file.require(&format!("{name}.bias"), &[o])?);
    }
    Ok(params)
}

pub fn save_weights(params: &MeNetParams<f32>, path: &Path, step: Option<u64>) -> Result<()> {
    params_to_weight_file(params, step).write(path)
}

pub fn load_weights(path: &Path) -> Result<MeNetParams<f32>> {
    params_from_weight_file(&WeightFile::read(path)?)
}
