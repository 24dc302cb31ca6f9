//! Named parameter storage and the `PPNW` binary weights format.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PPNW" | version=1 | tensor count
//! per tensor: name length | UTF-8 name | rank | dims[rank] | f32 LE payload
//! ```
//!
//! Tensors are written in lexicographic name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PPNW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Param {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "parameter {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![0.0; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    params: BTreeMap<String, Param>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Option<Param> {
        self.params.insert(name.into(), param)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// Returns the payload of `name`, checking it has exactly `dims`.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if p.dims != dims {
            return Err(Error::WeightShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                actual: p.dims.clone(),
            });
        }
        Ok(&p.data)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// A store with the same names and dims, all zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Param::zeros(v.dims.clone())))
                .collect(),
        }
    }

    /// Euclidean norm over every scalar, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.data.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        write_u32(&mut w, to_u32(self.params.len(), "tensor count")?)?;
        for (name, p) in &self.params {
            write_u32(&mut w, to_u32(name.len(), "name length")?)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, to_u32(p.dims.len(), "rank")?)?;
            for &d in &p.dims {
                write_u32(&mut w, to_u32(d, "dimension")?)?;
            }
            for &v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(malformed(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| malformed(format!("tensor name is not UTF-8: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(read_u32(&mut r)? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| malformed(format!("tensor `{name}` dims overflow")))?;
            let mut bytes = vec![0u8; n.checked_mul(4).ok_or_else(|| malformed("payload overflow".into()))?];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.params.contains_key(&name) {
                return Err(malformed(format!("duplicate tensor `{name}`")));
            }
            store.params.insert(name, Param { dims, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(malformed("trailing bytes after last tensor".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn malformed(reason: String) -> Error {
    Error::Format { what: "weights file", reason }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| malformed(format!("{what} {v} exceeds u32")))
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => malformed("unexpected end of file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let mut s = WeightStore::new();
        s.insert("b", Param::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut buf = vec![];
        s.write_to(&mut buf).unwrap();
        let mut expected = b"PPNW".to_vec();
        for v in [1u32, 1, 1] {
            expected.extend(v.to_le_bytes());
        }
        expected.push(b'b');
        for v in [1u32, 2] {
            expected.extend(v.to_le_bytes());
        }
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corruption() {
        let mut s = WeightStore::new();
        s.insert("w", Param::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut buf = vec![];
        s.write_to(&mut buf).unwrap();
        assert!(WeightStore::read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(WeightStore::read_from(&extra[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(WeightStore::read_from(&bad[..]).is_err());
        let mut bad_version = buf;
        bad_version[4] = 2;
        assert!(WeightStore::read_from(&bad_version[..]).is_err());
    }

    #[test]
    fn expect_checks_dims() {
        let mut s = WeightStore::new();
        s.insert("w", Param::zeros(vec![2, 2]));
        assert!(s.expect("w", &[2, 2]).is_ok());
        assert!(matches!(s.expect("w", &[4]), Err(Error::WeightShape { .. })));
        assert!(matches!(s.expect("nope", &[4]), Err(Error::MissingWeight(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(entries in prop::collection::btree_map(
            "[a-z/_0-9]{1,12}",
            prop::collection::vec(any::<u32>(), 0..20),
            0..6,
        )) {
            let mut s = WeightStore::new();
            for (name, bits) in &entries {
                let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
                s.insert(name.clone(), Param::new(vec![data.len()], data).unwrap());
            }
            let mut buf = vec![];
            s.write_to(&mut buf).unwrap();
            let back = WeightStore::read_from(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), s.len());
            for ((n1, p1), (n2, p2)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(p1.dims(), p2.dims());
                let b1: Vec<u32> = p1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = p2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
