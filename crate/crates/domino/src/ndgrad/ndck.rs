//! NDCK container: the on-disk format shared by checkpoints and converted
//! or synthesized datasets.
//!
//! Layout: magic bytes `NDCK`, u32 version (1), u32 array count, then per
//! array: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! one u32 per dimension, raw payload. All integers and payloads are
//! little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::array::{Array, Dtype, Scalar};
use super::NdError;

const MAGIC: &[u8; 4] = b"NDCK";
const VERSION: u32 = 1;

/// One named array as stored in a container, without committing to f32/f64
/// at the type level.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredArray {
    F32(Array<f32>),
    F64(Array<f64>),
}

impl StoredArray {
    pub fn dtype(&self) -> Dtype {
        match self {
            StoredArray::F32(_) => Dtype::F32,
            StoredArray::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredArray::F32(a) => a.shape(),
            StoredArray::F64(a) => a.shape(),
        }
    }

    /// View as f32, converting if necessary.
    pub fn to_f32(&self) -> Array<f32> {
        match self {
            StoredArray::F32(a) => a.clone(),
            StoredArray::F64(a) => a.cast(),
        }
    }

    /// View as f64, converting if necessary.
    pub fn to_f64(&self) -> Array<f64> {
        match self {
            StoredArray::F32(a) => a.cast(),
            StoredArray::F64(a) => a.clone(),
        }
    }
}

/// Convert a typed array into the storage enum.
pub fn store<T: Scalar>(array: &Array<T>) -> StoredArray {
    match T::DTYPE {
        Dtype::F32 => StoredArray::F32(array.map(|v| v.to_f64() as f32)),
        Dtype::F64 => StoredArray::F64(array.map(|v| v.to_f64())),
    }
}

/// Write `arrays` to `path` in name order (BTreeMap iteration), so equal
/// contents always produce byte-identical files.
pub fn write_ndck(path: &Path, arrays: &BTreeMap<String, StoredArray>) -> Result<(), NdError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(arrays.len())
        .map_err(|_| NdError::Format("more than u32::MAX arrays".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, arr) in arrays {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| NdError::Format(format!("array name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[arr.dtype().code()])?;
        let shape = arr.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| NdError::Format(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| NdError::Format(format!("dim too large in {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match arr {
            StoredArray::F32(a) => {
                for v in a.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            StoredArray::F64(a) => {
                for v in a.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndck(path: &Path) -> Result<BTreeMap<String, StoredArray>, NdError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NdError::Format(format!("{}: bad magic {magic:?}, expected \"NDCK\"", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NdError::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let count = read_u32(&mut r)?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NdError::Format(format!("{}: array name is not UTF-8", path.display())))?;
        let mut meta = [0u8; 2];
        r.read_exact(&mut meta)?;
        let dtype = Dtype::from_code(meta[0])
            .ok_or_else(|| NdError::Format(format!("{}: unknown dtype code {} for {name}", path.display(), meta[0])))?;
        let rank = meta[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let arr = match dtype {
            Dtype::F32 => {
                let mut buf = vec![0u8; numel * 4];
                r.read_exact(&mut buf)?;
                let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                StoredArray::F32(
                    Array::new(shape, data)
                        .map_err(|e| NdError::Format(format!("{}: {name}: {e}", path.display())))?,
                )
            }
            Dtype::F64 => {
                let mut buf = vec![0u8; numel * 8];
                r.read_exact(&mut buf)?;
                let data = buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                StoredArray::F64(
                    Array::new(shape, data)
                        .map_err(|e| NdError::Format(format!("{}: {name}: {e}", path.display())))?,
                )
            }
        };
        if arrays.insert(name.clone(), arr).is_some() {
            return Err(NdError::Format(format!("{}: duplicate array name {name}", path.display())));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NdError::Format(format!("{}: trailing bytes after last array", path.display())));
    }
    Ok(arrays)
}

fn read_u16(r: &mut impl Read) -> Result<u16, NdError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, NdError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ndck");
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "enc0/w".to_string(),
            StoredArray::F32(Array::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 4.25, -0.125]).unwrap()),
        );
        arrays.insert("meta/labels".to_string(), StoredArray::F64(Array::from_vec(vec![0.0, 1.0, 2.0])));
        write_ndck(&path, &arrays).unwrap();
        let back = read_ndck(&path).unwrap();
        assert_eq!(back, arrays);
    }

    #[test]
    fn identical_contents_produce_identical_bytes() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.ndck");
        let b = dir.path().join("b.ndck");
        let mut arrays = BTreeMap::new();
        arrays.insert("z".to_string(), StoredArray::F32(Array::from_vec(vec![1.0, 2.0])));
        arrays.insert("a".to_string(), StoredArray::F32(Array::from_vec(vec![3.0])));
        write_ndck(&a, &arrays).unwrap();
        write_ndck(&b, &arrays).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ndck");
        std::fs::write(&path, b"JUNK\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_ndck(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.ndck");
        let mut arrays = BTreeMap::new();
        arrays.insert("x".to_string(), StoredArray::F32(Array::from_vec(vec![1.0, 2.0, 3.0, 4.0])));
        write_ndck(&path, &arrays).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_ndck(&path).is_err());
    }
}
