use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{GroupPartition, Mask};

/// Output of one labeling search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub sample_id: String,
    pub mask: Mask,
    pub loss: f64,
    pub partition_digest: String,
    pub scorer_id: String,
    pub seed: u64,
}

impl LabelRecord {
    pub fn validate(&self, partition: &GroupPartition) -> Result<()> {
        if !self.loss.is_finite() {
            return Err(Error::InvalidMask(format!(
                "label for {} has non-finite loss",
                self.sample_id
            )));
        }
        if self.partition_digest != partition.digest() {
            return Err(Error::LabelMismatch(format!(
                "label for {} was produced with a different partition",
                self.sample_id
            )));
        }
        self.mask.validate_against(partition)
    }
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for label in labels {
        serde_json::to_writer(&mut out, label)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let label: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        labels.push(label);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_shape() {
        let label = LabelRecord {
            sample_id: "s1".into(),
            mask: Mask::from_bits(vec![1, 0]).unwrap(),
            loss: 0.25,
            partition_digest: "ab".into(),
            scorer_id: "planted:1".into(),
            seed: 9,
        };
        let line = serde_json::to_string(&label).unwrap();
        assert_eq!(
            line,
            r#"{"sample_id":"s1","mask":[1,0],"loss":0.25,"partition_digest":"ab","scorer_id":"planted:1","seed":9}"#
        );
        let back: LabelRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, label);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let labels = vec![LabelRecord {
            sample_id: "a".into(),
            mask: Mask::from_bits(vec![0, 1, 0]).unwrap(),
            loss: 1.5,
            partition_digest: "x".into(),
            scorer_id: "pooled:3".into(),
            seed: 3,
        }];
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
    }
}
