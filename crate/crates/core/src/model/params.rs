//! Named, ordered parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "RESUNET\0"
//! version          u32      currently 1
//! width_scale      f64
//! bn_epsilon       f64
//! bn_momentum      f64
//! input_scaling    u8       0 = RGB scaled by 1/255, no mean centering
//! tensor_count     u32
//! per tensor:
//!   name_len       u32
//!   name           UTF-8 bytes
//!   shape          4 x u64  (N, C, H, W)
//!   data           N*C*H*W x f32
//! ```
//!
//! Tensors appear in store iteration order, so a save/load round trip
//! reproduces both values and ordering bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RESUNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Default batch-norm epsilon; recorded in every checkpoint.
pub const BN_EPSILON: f64 = 1e-5;
/// Default batch-norm running-statistics momentum; recorded in every checkpoint.
pub const BN_MOMENTUM: f64 = 0.9;

/// How input pixels were normalized when the parameters were trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputScaling {
    /// RGB bytes scaled by 1/255 into [0, 1]; no mean centering.
    UnitRange,
}

impl InputScaling {
    fn to_u8(self) -> u8 {
        match self {
            InputScaling::UnitRange => 0,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(InputScaling::UnitRange),
            _ => None,
        }
    }
}

/// Scalar metadata carried alongside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreMeta {
    pub width_scale: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub input_scaling: InputScaling,
}

impl StoreMeta {
    pub fn with_width_scale(width_scale: f64) -> Self {
        StoreMeta {
            width_scale,
            bn_epsilon: BN_EPSILON,
            bn_momentum: BN_MOMENTUM,
            input_scaling: InputScaling::UnitRange,
        }
    }
}

impl Default for StoreMeta {
    fn default() -> Self {
        StoreMeta::with_width_scale(1.0)
    }
}

/// Ordered map from parameter name to tensor. Iteration order is insertion
/// order and is stable across save/load.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar = f32> {
    entries: IndexMap<String, Tensor<S>>,
    pub meta: StoreMeta,
}

/// Learnable parameters are conv kernels and batch-norm scale/shift;
/// running statistics are state, not parameters.
pub fn is_learnable(name: &str) -> bool {
    name.ends_with(".kernel") || name.ends_with(".gamma") || name.ends_with(".beta")
}

fn is_main_conv(name: &str) -> bool {
    name.strip_prefix("conv")
        .and_then(|rest| rest.strip_suffix(".kernel"))
        .is_some_and(|digits| digits.parse::<u32>().is_ok())
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(meta: StoreMeta) -> Self {
        ParamStore {
            entries: IndexMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// A store of zero tensors mirroring this one's learnable entries, in
    /// the same order; the backward pass accumulates gradients into it.
    pub fn zeroed_learnable(&self) -> ParamStore<S> {
        let mut out = ParamStore::new(self.meta.clone());
        for (name, t) in self.iter() {
            if is_learnable(name) {
                out.insert(name, Tensor::zeros(t.shape()));
            }
        }
        out
    }

    /// Total learnable scalar count (kernels + batch-norm gamma/beta).
    pub fn count_learnable(&self) -> usize {
        self.iter()
            .filter(|(name, _)| is_learnable(name))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Scalar count of the main-path convolution kernels (`convN.kernel`)
    /// alone, excluding shortcut projections and batch-norm parameters.
    pub fn count_main_conv(&self) -> usize {
        self.iter()
            .filter(|(name, _)| is_main_conv(name))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Converts every tensor between scalar types through `f64`.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new(self.meta.clone());
        for (name, t) in self.iter() {
            out.insert(name, t.cast::<T>());
        }
        out
    }

    pub fn bit_eq(&self, other: &ParamStore<S>) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

impl ParamStore<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes).map_err(|e| Error::io(path, e))
        };

        put(&mut w, CHECKPOINT_MAGIC)?;
        put(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
        put(&mut w, &self.meta.width_scale.to_le_bytes())?;
        put(&mut w, &self.meta.bn_epsilon.to_le_bytes())?;
        put(&mut w, &self.meta.bn_momentum.to_le_bytes())?;
        put(&mut w, &[self.meta.input_scaling.to_u8()])?;
        put(&mut w, &(self.len() as u32).to_le_bytes())?;
        for (name, tensor) in self.iter() {
            put(&mut w, &(name.len() as u32).to_le_bytes())?;
            put(&mut w, name.as_bytes())?;
            for dim in tensor.shape() {
                put(&mut w, &(dim as u64).to_le_bytes())?;
            }
            for v in tensor.as_slice() {
                put(&mut w, &v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let truncated = |detail: &str| Error::CheckpointTruncated {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        fn take<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)?;
            Ok(buf)
        }

        let magic: [u8; 8] = take(&mut r).map_err(|_| truncated("missing header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointBadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = u32::from_le_bytes(take(&mut r).map_err(|_| truncated("missing version"))?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let width_scale =
            f64::from_le_bytes(take(&mut r).map_err(|_| truncated("missing width_scale"))?);
        let bn_epsilon =
            f64::from_le_bytes(take(&mut r).map_err(|_| truncated("missing bn_epsilon"))?);
        let bn_momentum =
            f64::from_le_bytes(take(&mut r).map_err(|_| truncated("missing bn_momentum"))?);
        let scaling_byte: [u8; 1] = take(&mut r).map_err(|_| truncated("missing input_scaling"))?;
        let input_scaling = InputScaling::from_u8(scaling_byte[0])
            .ok_or_else(|| truncated("unknown input_scaling tag"))?;
        let count = u32::from_le_bytes(take(&mut r).map_err(|_| truncated("missing count"))?);

        let mut store = ParamStore::new(StoreMeta {
            width_scale,
            bn_epsilon,
            bn_momentum,
            input_scaling,
        });
        for i in 0..count {
            let name_len =
                u32::from_le_bytes(take(&mut r).map_err(|_| truncated("missing name length"))?)
                    as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)
                .map_err(|_| truncated("missing name"))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| truncated("parameter name is not UTF-8"))?;
            let mut shape = [0usize; 4];
            for dim in &mut shape {
                *dim = u64::from_le_bytes(take(&mut r).map_err(|_| truncated("missing shape"))?)
                    as usize;
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)
                .map_err(|_| truncated(&format!("tensor {i} (`{name}`) data ends prematurely")))?;
            for chunk in buf.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            store.insert(name, Tensor::from_vec(shape, data)?);
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => Ok(store),
            Ok(_) => Err(truncated("trailing bytes after last tensor")),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

/// Validates that `store` carries exactly the tensors `shapes` describes.
pub fn validate_against<S: Scalar>(
    store: &ParamStore<S>,
    shapes: &[(String, [usize; 4])],
) -> Result<()> {
    for (name, shape) in shapes {
        let tensor = store
            .get(name)
            .map_err(|_| Error::CheckpointGraphMismatch {
                detail: format!("missing tensor `{name}`"),
            })?;
        if tensor.shape() != *shape {
            return Err(Error::CheckpointGraphMismatch {
                detail: format!(
                    "tensor `{name}` has shape {}, expected {}",
                    format_shape(&tensor.shape()),
                    format_shape(shape)
                ),
            });
        }
    }
    if store.len() != shapes.len() {
        let expected: std::collections::HashSet<&str> =
            shapes.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<&str> = store.names().filter(|n| !expected.contains(n)).collect();
        return Err(Error::CheckpointGraphMismatch {
            detail: format!("unexpected tensors: {}", extra.join(", ")),
        });
    }
    Ok(())
}
