//! Flat little-endian `f64` blob plus a text manifest.
//!
//! ```text
//! # patchrec tensors v1
//! tok_emb = 120x16 @ 0
//! pos_emb = 64x16 @ 15360
//! ```
//!
//! Each line maps a parameter name to its shape and byte offset in
//! `params.bin`. Tensors are laid out back to back in manifest order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
const HEADER: &str = "# patchrec tensors v1";

pub fn save_tensors(dir: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob = Vec::new();
    for (name, t) in tensors {
        if name.contains(['=', '\n']) || name.trim() != *name || name.is_empty() {
            return Err(Error::InvalidArgument(format!("bad tensor name `{name}`")));
        }
        let shape = t
            .shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("{name} = {shape} @ {}\n", blob.len()));
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Corrupt("missing manifest header".into()));
    }
    let mut out = Vec::new();
    let mut expected_offset = 0usize;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (name, rest) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Corrupt(format!("bad manifest line `{line}`")))?;
        let (shape, offset) = rest
            .split_once(" @ ")
            .ok_or_else(|| Error::Corrupt(format!("bad manifest line `{line}`")))?;
        let shape: Vec<usize> = if shape.is_empty() {
            vec![]
        } else {
            shape
                .split('x')
                .map(|s| s.parse().map_err(|_| Error::Corrupt(format!("bad shape in `{line}`"))))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad offset in `{line}`")))?;
        if offset != expected_offset {
            return Err(Error::Corrupt(format!(
                "`{name}` at offset {offset}, expected {expected_offset}"
            )));
        }
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > blob.len() {
            return Err(Error::Corrupt(format!(
                "`{name}` needs bytes {offset}..{end} but blob has {}",
                blob.len()
            )));
        }
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::Corrupt(format!(
            "blob has {} bytes, manifest accounts for {expected_offset}",
            blob.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Vec<(String, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        vec![
            ("a".into(), Tensor::uniform(&[3, 4], 1.0, &mut rng)),
            ("b.bias".into(), Tensor::uniform(&[4], 1.0, &mut rng)),
            (
                "special".into(),
                Tensor::new(vec![3], vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
            ),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = sample();
        let refs: Vec<_> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(dir.path(), &refs).unwrap();
        let loaded = load_tensors(dir.path()).unwrap();
        assert_eq!(loaded.len(), tensors.len());
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&loaded) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let b1: Vec<u64> = t1.data.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_blob_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = sample();
        let refs: Vec<_> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(dir.path(), &refs).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_tensors(dir.path()), Err(Error::Corrupt(_))));
        fs::write(&path, [bytes.clone(), vec![0u8; 8]].concat()).unwrap();
        assert!(matches!(load_tensors(dir.path()), Err(Error::Corrupt(_))));
    }
}
