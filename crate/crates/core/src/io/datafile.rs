use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diff::Tensor;
use crate::eval::Dataset;

use super::{malformed, IoError};

const MAGIC: &[u8; 6] = b"GSCCD1";

/// Writes a dataset: magic, u32 `N,C,H,W,num_classes`, little-endian f32
/// images `[N,C,H,W]`, then `N` u32 labels.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let s = ds.images.shape();
    w.write_all(MAGIC)?;
    for v in [s[0], s[1], s[2], s[3], ds.num_classes as usize] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in ds.images.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &l in &ds.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic { expected: "GSCCD1", found: magic.to_vec() });
    }
    let mut dims = [0u32; 5];
    let mut buf = [0u8; 4];
    for d in dims.iter_mut() {
        r.read_exact(&mut buf)?;
        *d = u32::from_le_bytes(buf);
    }
    let [n, c, h, w, classes] = dims.map(|v| v as usize);
    let count = n * c * h * w;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        let l = u32::from_le_bytes(buf);
        if l as usize >= classes {
            return Err(malformed("dataset file", format!("label {l} >= {classes} classes")));
        }
        labels.push(l);
    }
    let images = Tensor::new(vec![n, c, h, w], data)
        .map_err(|e| malformed("dataset file", e.to_string()))?;
    Ok(Dataset { images, labels, num_classes: classes as u32 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gsccd");
        let ds = Dataset {
            images: Tensor::new(vec![2, 1, 2, 2], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.9, 0.8, 0.7])
                .unwrap(),
            labels: vec![3, 1],
            num_classes: 4,
        };
        write_dataset(&path, &ds).unwrap();
        let got = read_dataset(&path).unwrap();
        assert_eq!(got.images, ds.images);
        assert_eq!(got.labels, ds.labels);
        assert_eq!(got.num_classes, 4);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gsccd");
        let ds = Dataset {
            images: Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap(),
            labels: vec![9],
            num_classes: 4,
        };
        // bypass the writer's type safety by writing raw
        write_dataset(&path, &ds).unwrap();
        assert!(matches!(read_dataset(&path), Err(IoError::Malformed { .. })));
    }
}
