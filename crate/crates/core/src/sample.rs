use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// One training instance: visual and text token embeddings of a shared width.
///
/// Embeddings are stored at 32-bit precision, matching the on-disk container;
/// numerical code widens them to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub visual: Array2<f32>,
    pub text: Array2<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    /// Builds and validates a sample.
    pub fn new(id: impl Into<String>, visual: Array2<f32>, text: Array2<f32>) -> Result<Self> {
        let sample = Sample {
            id: id.into(),
            visual,
            text,
            meta: BTreeMap::new(),
        };
        validate_sample(&sample)?;
        Ok(sample)
    }

    pub fn n_visual(&self) -> usize {
        self.visual.nrows()
    }

    pub fn n_text(&self) -> usize {
        self.text.nrows()
    }

    pub fn width(&self) -> usize {
        self.visual.ncols()
    }

    /// Copy of this sample with the text stream removed.
    pub fn without_text(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            visual: self.visual.clone(),
            text: Array2::zeros((0, self.width())),
            meta: self.meta.clone(),
        }
    }
}

pub fn validate_sample(sample: &Sample) -> Result<()> {
    if sample.visual.nrows() == 0 {
        return Err(Error::EmptyVisual);
    }
    let d = sample.visual.ncols();
    if d == 0 {
        return Err(Error::DimensionMismatch {
            what: "embedding width",
            expected: 1,
            found: 0,
        });
    }
    if sample.text.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "text width",
            expected: d,
            found: sample.text.ncols(),
        });
    }
    check_finite("visual", &sample.visual)?;
    check_finite("text", &sample.text)?;
    Ok(())
}

fn check_finite(what: &'static str, m: &Array2<f32>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what, row, col });
        }
    }
    Ok(())
}

/// Vocabulary anchors used as cluster centres for grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Array2<f32>,
}

impl AnchorSet {
    pub fn new(anchors: Array2<f32>) -> Result<Self> {
        if anchors.nrows() == 0 {
            return Err(Error::EmptyAnchors);
        }
        check_finite("anchors", &anchors)?;
        for (j, row) in anchors.rows().into_iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroAnchor(j));
            }
        }
        Ok(AnchorSet { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, f32> {
        self.anchors.row(j)
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.anchors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn filled(rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |(r, c)| (r * cols + c) as f32 * 0.1)
    }

    #[test]
    fn well_formed_sample_validates() {
        assert!(Sample::new("s", filled(3, 4), filled(2, 4)).is_ok());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let err = Sample::new("s", filled(3, 4), filled(2, 5)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "text width", .. }));
    }

    #[test]
    fn nan_is_rejected() {
        let mut v = filled(3, 4);
        v[[1, 2]] = f32::NAN;
        let err = Sample::new("s", v, filled(2, 4)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 2, .. }));
    }

    #[test]
    fn empty_visual_is_rejected() {
        let err = Sample::new("s", filled(0, 4), filled(2, 4)).unwrap_err();
        assert!(matches!(err, Error::EmptyVisual));
    }

    #[test]
    fn text_may_be_empty() {
        assert!(Sample::new("s", filled(1, 4), filled(0, 4)).is_ok());
    }

    #[test]
    fn zero_anchor_is_rejected() {
        let mut a = filled(2, 3);
        a.row_mut(0).fill(0.0);
        assert!(matches!(AnchorSet::new(a), Err(Error::ZeroAnchor(0))));
        assert!(matches!(
            AnchorSet::new(Array2::zeros((0, 3))),
            Err(Error::EmptyAnchors)
        ));
    }
}
