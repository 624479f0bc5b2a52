use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    load_features, load_labels, write_features, write_labels, DatasetBundle, Split, SynthConfig,
};
use crate::error::{Error, Result};

pub const BUNDLE_MANIFEST: &str = "bundle.json";

/// JSON manifest that sits next to the feature and label files of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BundleManifest {
    pub image: String,
    pub text: String,
    #[serde(default)]
    pub labels: Option<String>,
    pub split: Split,
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

pub fn save_bundle(
    dir: impl AsRef<Path>,
    bundle: &DatasetBundle,
    synth: Option<&SynthConfig>,
) -> Result<BundleManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bundle.validate()?;
    write_features(dir.join("image.assf"), &bundle.image)?;
    write_features(dir.join("text.assf"), &bundle.text)?;
    if let Some(l) = &bundle.labels {
        write_labels(dir.join("labels.csv"), l)?;
    }
    let manifest = BundleManifest {
        image: "image.assf".into(),
        text: "text.assf".into(),
        labels: bundle.labels.as_ref().map(|_| "labels.csv".into()),
        split: bundle.split.clone(),
        split_seed: synth.map(|s| s.split.seed.unwrap_or(s.seed)),
        synth: synth.cloned(),
    };
    let path = dir.join(BUNDLE_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<(DatasetBundle, BundleManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(BUNDLE_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format("bundle manifest", e.to_string()))?;
    let bundle = DatasetBundle {
        image: load_features(dir.join(&manifest.image), None)?,
        text: load_features(dir.join(&manifest.text), None)?,
        labels: match &manifest.labels {
            Some(l) => Some(load_labels(dir.join(l))?),
            None => None,
        },
        split: manifest.split.clone(),
    };
    bundle.validate()?;
    Ok((bundle, manifest))
}
