//! Named parameter storage and the `TFCK` checkpoint format.
//!
//! Layout (little-endian): magic `TFCK`, version `u32`, parameter count
//! `u32`, then per parameter: name length `u32`, UTF-8 name, rank `u32`,
//! one `u32` per dimension, and the values as `f32`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors. Insertion order is the
/// serialization order, so checkpoints are byte-stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every value with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: self.values[i].shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        write_u32(&mut w, to_u32(self.len())?)?;
        for (name, value) in self.names.iter().zip(&self.values) {
            write_u32(&mut w, to_u32(name.len())?)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, to_u32(value.rank())?)?;
            for &d in value.shape() {
                write_u32(&mut w, to_u32(d)?)?;
            }
            let mut buf = Vec::with_capacity(value.numel() * 4);
            for v in value.data() {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.add(name, Tensor::new(&shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| TensorError::Checkpoint(format!("{v} does not fit in u32")))
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("fusion.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25))
            .unwrap();
        s.add("fusion.b", Tensor::from_fn(&[3], |i| -(i as f32)))
            .unwrap();
        s
    }

    #[test]
    fn checkpoint_layout_is_bit_exact() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TFCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 8);
        assert_eq!(&buf[16..24], b"fusion.w");
        // rank 2, dims 2 and 3, then six floats
        assert_eq!(u32::from_le_bytes(buf[24..28].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[28..32].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[32..36].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(buf[40..44].try_into().unwrap()), 0.25);
        let expected_len = 12 + (4 + 8 + 4 + 8 + 24) + (4 + 8 + 4 + 4 + 12);
        assert_eq!(buf.len(), expected_len);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::<f32>::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(ParamStore::<f32>::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(matches!(
            s.add("fusion.b", Tensor::zeros(&[1])),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut s = sample();
        let mut other = ParamStore::new();
        other.add("fusion.w", Tensor::zeros(&[3, 2])).unwrap();
        other.add("fusion.b", Tensor::zeros(&[3])).unwrap();
        assert!(s.load_from(&other).is_err());
    }
}
