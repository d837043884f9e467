//! The `EVC1` sample container and its JSON sidecar manifest.
//!
//! Each record is the magic `EVC1`, little-endian `u32` fields
//! `(n, m, d, id_len)`, the UTF-8 id, then `n*d` and `m*d` little-endian
//! `f32` values in row-major order. A file is a plain concatenation of
//! records.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::sample::{validate_sample, AnchorSet, Sample};

pub const MAGIC: &[u8; 4] = b"EVC1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub records: usize,
    /// Hex SHA-256 of the container bytes.
    pub checksum: String,
}

pub fn encode_record<W: Write>(out: &mut W, sample: &Sample) -> io::Result<()> {
    let d = sample.width();
    out.write_all(MAGIC)?;
    for field in [sample.n_visual(), sample.n_text(), d, sample.id.len()] {
        out.write_all(&(field as u32).to_le_bytes())?;
    }
    out.write_all(sample.id.as_bytes())?;
    for v in sample.visual.iter().chain(sample.text.iter()) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode(samples: &[Sample]) -> Vec<u8> {
    let mut buf = Vec::new();
    for s in samples {
        encode_record(&mut buf, s).expect("writing to a Vec cannot fail");
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut cursor = bytes;
    let mut samples = Vec::new();
    while !cursor.is_empty() {
        samples.push(decode_record(&mut cursor)?);
    }
    Ok(samples)
}

fn read_u32(cursor: &mut &[u8]) -> Result<usize> {
    let mut word = [0u8; 4];
    cursor
        .read_exact(&mut word)
        .map_err(|_| Error::Format("truncated record header".into()))?;
    Ok(u32::from_le_bytes(word) as usize)
}

fn read_matrix(cursor: &mut &[u8], rows: usize, cols: usize) -> Result<Array2<f32>> {
    let len = rows * cols * 4;
    if cursor.len() < len {
        return Err(Error::Format("truncated embedding payload".into()));
    }
    let (payload, rest) = cursor.split_at(len);
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *cursor = rest;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

fn decode_record(cursor: &mut &[u8]) -> Result<Sample> {
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let n = read_u32(cursor)?;
    let m = read_u32(cursor)?;
    let d = read_u32(cursor)?;
    let id_len = read_u32(cursor)?;
    if cursor.len() < id_len {
        return Err(Error::Format("truncated id".into()));
    }
    let (id, rest) = cursor.split_at(id_len);
    let id = std::str::from_utf8(id)
        .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?
        .to_owned();
    *cursor = rest;
    let visual = read_matrix(cursor, n, d)?;
    let text = read_matrix(cursor, m, d)?;
    Ok(Sample {
        id,
        visual,
        text,
        meta: Default::default(),
    })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the container and its `<path>.json` sidecar.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<ContainerManifest> {
    let bytes = encode(samples);
    let manifest = ContainerManifest {
        records: samples.len(),
        checksum: sha256_hex(&bytes),
    };
    fs::write(path, &bytes)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a container, verifying the sidecar when present and validating
/// every sample.
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path)?;
    let sidecar = manifest_path(path);
    if sidecar.exists() {
        let manifest: ContainerManifest = serde_json::from_slice(&fs::read(&sidecar)?)?;
        let checksum = sha256_hex(&bytes);
        if manifest.checksum != checksum {
            return Err(Error::Format(format!(
                "{}: checksum {checksum} does not match manifest {}",
                path.display(),
                manifest.checksum
            )));
        }
        let samples = decode(&bytes)?;
        if samples.len() != manifest.records {
            return Err(Error::Format(format!(
                "{}: {} records, manifest lists {}",
                path.display(),
                samples.len(),
                manifest.records
            )));
        }
        samples.iter().try_for_each(validate_sample)?;
        return Ok(samples);
    }
    let samples = decode(&bytes)?;
    samples.iter().try_for_each(validate_sample)?;
    Ok(samples)
}

pub fn write_anchors(path: &Path, anchors: &AnchorSet) -> Result<ContainerManifest> {
    let record = Sample {
        id: "anchors".into(),
        visual: anchors.matrix().clone(),
        text: Array2::zeros((0, anchors.width())),
        meta: Default::default(),
    };
    write_dataset(path, std::slice::from_ref(&record))
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet> {
    let bytes = fs::read(path)?;
    let mut records = decode(&bytes)?;
    if records.len() != 1 {
        return Err(Error::Format(format!(
            "anchor file holds {} records, expected 1",
            records.len()
        )));
    }
    AnchorSet::new(records.remove(0).visual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let s = Sample::new(
            "ab",
            Array2::from_shape_vec((1, 2), vec![1.0, -2.0]).unwrap(),
            Array2::from_shape_vec((1, 2), vec![0.5, 0.0]).unwrap(),
        )
        .unwrap();
        let bytes = encode(&[s]);
        let mut expected = b"EVC1".to_vec();
        for v in [1u32, 1, 2, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(b"ab");
        for v in [1.0f32, -2.0, 0.5, 0.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_and_bad_magic() {
        assert!(matches!(decode(b"EVC"), Err(Error::Format(_))));
        assert!(matches!(decode(b"XXXX\0\0\0\0"), Err(Error::Format(_))));
        let s = Sample::new("x", Array2::ones((2, 2)), Array2::zeros((0, 2))).unwrap();
        let bytes = encode(&[s]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checksum_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.evc");
        let s = Sample::new("x", Array2::ones((2, 2)), Array2::zeros((0, 2))).unwrap();
        write_dataset(&path, &[s.clone(), s]).unwrap();
        assert_eq!(read_dataset(&path).unwrap().len(), 2);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            n in 1usize..5, m in 0usize..4, d in 1usize..5,
            id in "[a-z0-9-]{0,12}", seed in any::<u64>(),
        ) {
            let gen = |r: usize, c: usize, off: u64| {
                Array2::from_shape_fn((r, c), |(i, j)| {
                    let h = crate::hash::splitmix64(seed ^ off ^ ((i * 31 + j) as u64));
                    (crate::hash::unit_interval(h) as f32 - 0.5) * 8.0
                })
            };
            let s = Sample::new(id, gen(n, d, 1), gen(m, d, 2)).unwrap();
            let back = decode(&encode(std::slice::from_ref(&s))).unwrap();
            prop_assert_eq!(back, vec![s]);
        }
    }
}
