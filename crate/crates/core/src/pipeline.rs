//! Encoding a bundle's query and retrieval cells and evaluating both
//! retrieval directions.

use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetBundle, FeatureMatrix, LabelMatrix};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Direction, EvalReport, EvalSettings};
use crate::hashnet::{sign_codes, BinaryCodeMatrix, HashNet};

/// Codes for the selected rows. Signs do not depend on η, so encoding uses η = 1.
pub fn encode(net: &HashNet, features: &FeatureMatrix, rows: &[usize]) -> Result<BinaryCodeMatrix> {
    let h = net.forward(features.select_f64(rows).view(), 1.0)?;
    Ok(sign_codes(h.view()))
}

pub fn encode_all(net: &HashNet, features: &FeatureMatrix) -> Result<BinaryCodeMatrix> {
    let h = net.forward(features.to_f64().view(), 1.0)?;
    Ok(sign_codes(h.view()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCodes {
    pub image_query: BinaryCodeMatrix,
    pub text_query: BinaryCodeMatrix,
    pub image_db: BinaryCodeMatrix,
    pub text_db: BinaryCodeMatrix,
}

pub fn encode_split(bundle: &DatasetBundle, image: &HashNet, text: &HashNet) -> Result<SplitCodes> {
    let s = &bundle.split;
    Ok(SplitCodes {
        image_query: encode(image, &bundle.image, &s.query)?,
        text_query: encode(text, &bundle.text, &s.query)?,
        image_db: encode(image, &bundle.image, &s.retrieval)?,
        text_db: encode(text, &bundle.text, &s.retrieval)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalPair {
    pub i2t: EvalReport,
    pub t2i: EvalReport,
}

impl EvalPair {
    pub fn mean_map(&self) -> f64 {
        0.5 * (self.i2t.map_all + self.t2i.map_all)
    }
}

fn split_labels(bundle: &DatasetBundle) -> Result<(LabelMatrix, LabelMatrix)> {
    let labels = bundle
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs a label matrix".into()))?;
    Ok((labels.select(&bundle.split.query), labels.select(&bundle.split.retrieval)))
}

pub fn evaluate_codes(bundle: &DatasetBundle, codes: &SplitCodes, settings: &EvalSettings) -> Result<EvalPair> {
    let (ql, dl) = split_labels(bundle)?;
    Ok(EvalPair {
        i2t: evaluate(Direction::I2T, &codes.image_query, &codes.text_db, &ql, &dl, settings)?,
        t2i: evaluate(Direction::T2I, &codes.text_query, &codes.image_db, &ql, &dl, settings)?,
    })
}

pub fn evaluate_nets(
    bundle: &DatasetBundle,
    image: &HashNet,
    text: &HashNet,
    settings: &EvalSettings,
) -> Result<EvalPair> {
    evaluate_codes(bundle, &encode_split(bundle, image, text)?, settings)
}
