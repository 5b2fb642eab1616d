//! Named parameter tensors and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LAPCKPT\0"
//! version  u32      layout version
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (utf-8)
//!   dtype    u8     1 = f64
//!   ndim     u32, dims u64 * ndim
//!   data     f64 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayView1, ArrayView2, IxDyn, Ix1, Ix2};

use super::NetworkError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LAPCKPT\0";
pub const LAYOUT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Ordered map of parameter name to tensor. Iteration order is the sorted
/// name order, which fixes the serialization and optimizer order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn zeros<'a>(layout: impl IntoIterator<Item = &'a (String, Vec<usize>)>) -> ParamStore {
        ParamStore {
            tensors: layout
                .into_iter()
                .map(|(name, shape)| (name.clone(), ArrayD::zeros(IxDyn(shape))))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>, NetworkError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NetworkError::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>, NetworkError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NetworkError::MissingParameter(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>, NetworkError> {
        let t = self.get(name)?;
        t.view().into_dimensionality::<Ix2>().map_err(|_| NetworkError::ParameterShape {
            name: name.to_string(),
            expected: "2-d".into(),
            found: t.shape().to_vec(),
        })
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, f64>, NetworkError> {
        let t = self.get(name)?;
        t.view().into_dimensionality::<Ix1>().map_err(|_| NetworkError::ParameterShape {
            name: name.to_string(),
            expected: "1-d".into(),
            found: t.shape().to_vec(),
        })
    }

    /// Add `tensor` into the named entry, which must exist with the same size.
    pub fn accumulate(&mut self, name: &str, tensor: ArrayView1<'_, f64>) -> Result<(), NetworkError> {
        let slot = self.get_mut(name)?;
        if slot.len() != tensor.len() {
            return Err(NetworkError::ParameterShape {
                name: name.to_string(),
                expected: format!("{} elements", slot.len()),
                found: vec![tensor.len()],
            });
        }
        for (s, v) in slot.iter_mut().zip(tensor.iter()) {
            *s += v;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// `(name, shape)` pairs in store order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) -> Result<(), NetworkError> {
        for (name, tensor) in &other.tensors {
            let slot = self.get_mut(name)?;
            if slot.shape() != tensor.shape() {
                return Err(NetworkError::ParameterShape {
                    name: name.clone(),
                    expected: format!("{:?}", slot.shape()),
                    found: tensor.shape().to_vec(),
                });
            }
            slot.scaled_add(scale, tensor);
        }
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&LAYOUT_VERSION.to_le_bytes())?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&[DTYPE_F64])?;
            out.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in tensor.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(input: &mut impl Read) -> Result<ParamStore, NetworkError> {
        let corrupt = |what: &str| NetworkError::Checkpoint(what.to_string());
        let mut magic = [0u8; 8];
        read_exact(input, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(input)?;
        if version != LAYOUT_VERSION {
            return Err(NetworkError::Checkpoint(format!(
                "layout version {version}, expected {LAYOUT_VERSION}"
            )));
        }
        let count = read_u32(input)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(input)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(input, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not utf-8"))?;
            let mut dtype = [0u8; 1];
            read_exact(input, &mut dtype)?;
            if dtype[0] != DTYPE_F64 {
                return Err(NetworkError::Checkpoint(format!("unsupported dtype {} for {name}", dtype[0])));
            }
            let ndim = read_u32(input)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(input, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(input, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| corrupt("shape/data mismatch"))?;
            store.insert(name, tensor);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let io_err = |source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        self.write_to(&mut file).map_err(io_err)?;
        file.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<ParamStore, NetworkError> {
        let file = fs::File::open(path).map_err(|source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ParamStore::read_from(&mut io::BufReader::new(file))
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<(), NetworkError> {
    input
        .read_exact(buf)
        .map_err(|e| NetworkError::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32(input: &mut impl Read) -> Result<u32, NetworkError> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn checkpoint_round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), split in 1usize..4) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.insert("a.weight", ArrayD::from_shape_vec(IxDyn(&[n]), values.clone()).unwrap());
            let rows = split.min(n);
            let cols = n / rows;
            store.insert("b.kernel", ArrayD::from_shape_vec(IxDyn(&[rows, cols]), values[..rows * cols].to_vec()).unwrap());
            let bytes = store.to_bytes();
            let back = ParamStore::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.layout(), store.layout());
            for ((_, a), (_, b)) in back.iter().zip(store.iter()) {
                let bits_a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::zeros(IxDyn(&[2, 2])));
        let bytes = store.to_bytes();
        assert!(ParamStore::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::read_from(&mut bad.as_slice()).is_err());
    }
}
