//! Feature/label ingestion, dataset bundles and the synthetic generator.

mod bundle;
mod features;
mod labels;
mod synth;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bundle::{load_bundle, save_bundle, BundleManifest, BUNDLE_MANIFEST};
pub use features::{
    decode_assf, encode_assf, load_features, read_assf_raw, write_assf_raw, write_features,
};
pub use labels::{load_labels, parse_labels, render_labels, write_labels};
pub use synth::{generate_synthetic, SplitConfig, SynthConfig};

/// Per-instance modality features, one row per instance.
///
/// Rows always have strictly positive norm and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        for (row, r) in values.outer_iter().enumerate() {
            let mut sq = 0.0f64;
            for (col, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row, col });
                }
                sq += f64::from(v) * f64::from(v);
            }
            if sq <= 0.0 {
                return Err(Error::ZeroNormRow { row });
            }
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.values.row(i)
    }

    /// Features widened to f64, restricted to `indices` (in that order).
    pub fn select_f64(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (dst, &src) in indices.iter().enumerate() {
            for (o, &v) in out.row_mut(dst).iter_mut().zip(self.values.row(src).iter()) {
                *o = f64::from(v);
            }
        }
        out
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).assign(&self.values.row(src));
        }
        FeatureMatrix { values: out }
    }
}

/// Multi-hot ground-truth labels. Only used for evaluation and synthesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    values: Array2<u8>,
}

impl LabelMatrix {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        for (row, r) in values.outer_iter().enumerate() {
            if let Some(col) = r.iter().position(|&v| v > 1) {
                return Err(Error::format(
                    "labels",
                    format!("non-binary entry at row {row}, column {col}"),
                ));
            }
            if r.iter().all(|&v| v == 0) {
                return Err(Error::EmptyLabelRow { row });
            }
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn cardinality(&self, i: usize) -> usize {
        self.values.row(i).iter().filter(|&&v| v == 1).count()
    }

    /// True when instances `i` and `j` share at least one label.
    pub fn shares_label(&self, i: usize, j: usize) -> bool {
        self.values
            .row(i)
            .iter()
            .zip(self.values.row(j).iter())
            .any(|(&a, &b)| a & b == 1)
    }

    pub fn select(&self, indices: &[usize]) -> LabelMatrix {
        let mut out = Array2::zeros((indices.len(), self.classes()));
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).assign(&self.values.row(src));
        }
        LabelMatrix { values: out }
    }

    /// Rows packed into 64-bit words for fast overlap tests.
    pub fn packed(&self) -> Vec<Vec<u64>> {
        let words = self.classes().div_ceil(64);
        self.values
            .outer_iter()
            .map(|r| {
                let mut w = vec![0u64; words];
                for (c, &v) in r.iter().enumerate() {
                    if v == 1 {
                        w[c / 64] |= 1 << (c % 64);
                    }
                }
                w
            })
            .collect()
    }
}

/// Partition of row indices into train / query / retrieval cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub retrieval: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub image: FeatureMatrix,
    pub text: FeatureMatrix,
    pub labels: Option<LabelMatrix>,
    pub split: Split,
}

impl DatasetBundle {
    pub fn rows(&self) -> usize {
        self.image.rows()
    }

    /// Checks row agreement between modalities and the split invariants.
    ///
    /// Training rows may also appear in the retrieval set; queries may not.
    pub fn validate(&self) -> Result<()> {
        let m = self.image.rows();
        if self.text.rows() != m {
            return Err(Error::Dimension(format!(
                "image has {m} rows, text has {}",
                self.text.rows()
            )));
        }
        if let Some(l) = &self.labels {
            if l.rows() != m {
                return Err(Error::Dimension(format!(
                    "features have {m} rows, labels have {}",
                    l.rows()
                )));
            }
        }
        let mut seen = vec![0u8; m];
        const TRAIN: u8 = 1;
        const QUERY: u8 = 2;
        const RETRIEVAL: u8 = 4;
        for (cell, flag, name) in [
            (&self.split.train, TRAIN, "train"),
            (&self.split.query, QUERY, "query"),
            (&self.split.retrieval, RETRIEVAL, "retrieval"),
        ] {
            for &i in cell {
                if i >= m {
                    return Err(Error::format(
                        "split",
                        format!("{name} index {i} out of range for {m} rows"),
                    ));
                }
                if seen[i] & flag != 0 {
                    return Err(Error::format(
                        "split",
                        format!("{name} index {i} repeated"),
                    ));
                }
                seen[i] |= flag;
            }
        }
        if let Some(i) = seen.iter().position(|&s| s & QUERY != 0 && s & TRAIN != 0) {
            return Err(Error::format(
                "split",
                format!("index {i} is both a query and a training instance"),
            ));
        }
        if let Some(i) = seen
            .iter()
            .position(|&s| s & QUERY != 0 && s & RETRIEVAL != 0)
        {
            return Err(Error::format(
                "split",
                format!("index {i} is both a query and a retrieval instance"),
            ));
        }
        Ok(())
    }
}
