use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diff::Tensor;

use super::{malformed, IoError};

const MAGIC: &[u8; 6] = b"GSCCW1";

/// Writes named f32 tensors: magic, u32 count, then per tensor a u16 name
/// length, the UTF-8 name, u8 rank, u32 dims and little-endian f32 data.
pub fn write_tensors(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(malformed("tensor container", format!("name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        if t.rank() > u8::MAX as usize {
            return Err(malformed("tensor container", "rank exceeds u8"));
        }
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic { expected: "GSCCW1", found: magic.to_vec() });
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| malformed("tensor container", format!("name not UTF-8: {e}")))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| malformed("tensor container", e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32, IoError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16, IoError> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gsccw");
        let a = Tensor::<f32>::new(vec![2, 3], vec![1.5, -2.0, 0.0, 3.25, f32::MIN_POSITIVE, 9.0])
            .unwrap();
        let b = Tensor::<f32>::scalar(42.0);
        write_tensors(&path, &[("layer1.weight", &a), ("s", &b)]).unwrap();
        let got = read_tensors(&path).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, "layer1.weight");
        assert_eq!(got[0].1, a);
        assert_eq!(got[1].0, "s");
        assert_eq!(got[1].1, b);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.gsccw");
        std::fs::write(&path, b"NOPE!!rest").unwrap();
        assert!(matches!(read_tensors(&path), Err(IoError::BadMagic { .. })));
    }

    #[test]
    fn writes_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.gsccw");
        let p2 = dir.path().join("b.gsccw");
        let t = Tensor::<f32>::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        write_tensors(&p1, &[("x", &t)]).unwrap();
        write_tensors(&p2, &[("x", &t)]).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
