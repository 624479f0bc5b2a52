//! Additive class-prototype generator for labeled two-modality data.
//!
//! Each class owns one random unit prototype per modality. An instance's
//! feature is the sum of its classes' prototypes plus isotropic Gaussian
//! noise, so cosine similarity tracks label overlap in both modalities.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, FeatureMatrix, LabelMatrix, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SplitConfig {
    /// Fraction of instances drawn as queries.
    pub query_fraction: f64,
    /// Number of training instances; `None` takes every non-query instance.
    pub train_size: Option<usize>,
    /// Whether the retrieval database also contains the training instances.
    pub database_includes_train: bool,
    /// Seed for the split permutation; defaults to the data seed.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            query_fraction: 0.1,
            train_size: None,
            database_includes_train: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SynthConfig {
    pub classes: usize,
    pub instances: usize,
    pub dim_image: usize,
    pub dim_text: usize,
    pub label_cardinality: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub split: SplitConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            instances: 2000,
            dim_image: 128,
            dim_text: 64,
            label_cardinality: 1.5,
            noise_sigma: 0.5,
            seed: 0,
            split: SplitConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("instances", self.instances),
            ("dimImage", self.dim_image),
            ("dimText", self.dim_text),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.label_cardinality.is_finite() && self.label_cardinality > 0.0) {
            return Err(Error::Config("labelCardinality must be > 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noiseSigma must be >= 0".into()));
        }
        let s = &self.split;
        if !(0.0..1.0).contains(&s.query_fraction) {
            return Err(Error::Config("split.queryFraction must be in [0, 1)".into()));
        }
        let n_query = query_count(self.instances, s.query_fraction);
        let pool = self.instances - n_query;
        let train = s.train_size.unwrap_or(pool);
        if train == 0 || train > pool {
            return Err(Error::Config(format!(
                "split.trainSize must be in [1, {pool}], got {train}"
            )));
        }
        if !s.database_includes_train && train == pool {
            return Err(Error::Config(
                "retrieval set would be empty: lower trainSize or include train in database"
                    .into(),
            ));
        }
        Ok(())
    }
}

fn query_count(instances: usize, fraction: f64) -> usize {
    ((instances as f64) * fraction).round() as usize
}

fn unit_prototypes(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Array2<f64> {
    let mut p = Array2::<f64>::zeros((classes, dim));
    for mut row in p.outer_iter_mut() {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = row.dot(&row).sqrt();
            if n > 1e-12 {
                row /= n;
                break;
            }
        }
    }
    p
}

fn compose(
    rng: &mut ChaCha8Rng,
    prototypes: &Array2<f64>,
    labels: &Array2<u8>,
    noise: Option<&Normal<f64>>,
) -> Array2<f32> {
    let (m, c) = labels.dim();
    let dim = prototypes.ncols();
    let mut out = Array2::zeros((m, dim));
    let mut acc = vec![0.0f64; dim];
    for i in 0..m {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for k in 0..c {
            if labels[[i, k]] == 1 {
                for (a, p) in acc.iter_mut().zip(prototypes.row(k).iter()) {
                    *a += p;
                }
            }
        }
        if let Some(n) = noise {
            for a in acc.iter_mut() {
                *a += n.sample(rng);
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(acc.iter()) {
            *o = *a as f32;
        }
    }
    out
}

/// Deterministic for a fixed config: same seed yields an identical bundle.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (m, c) = (cfg.instances, cfg.classes);
    let img_proto = unit_prototypes(&mut rng, c, cfg.dim_image);
    let txt_proto = unit_prototypes(&mut rng, c, cfg.dim_text);

    let p = (cfg.label_cardinality / c as f64).min(1.0);
    let mut labels = Array2::<u8>::zeros((m, c));
    for mut row in labels.outer_iter_mut() {
        loop {
            for v in row.iter_mut() {
                *v = u8::from(rng.random_bool(p));
            }
            if row.iter().any(|&v| v == 1) {
                break;
            }
        }
    }

    let noise = (cfg.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma validated"));
    let image = compose(&mut rng, &img_proto, &labels, noise.as_ref());
    let text = compose(&mut rng, &txt_proto, &labels, noise.as_ref());

    let split = make_split(cfg);
    let bundle = DatasetBundle {
        image: FeatureMatrix::new(image)?,
        text: FeatureMatrix::new(text)?,
        labels: Some(LabelMatrix::new(labels)?),
        split,
    };
    bundle.validate()?;
    Ok(bundle)
}

const SPLIT_STREAM: u64 = 0x5eed_0000_0000_0001;

fn make_split(cfg: &SynthConfig) -> Split {
    let s = &cfg.split;
    let seed = s.seed.unwrap_or(cfg.seed) ^ SPLIT_STREAM;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..cfg.instances).collect();
    perm.shuffle(&mut rng);
    let n_query = query_count(cfg.instances, s.query_fraction);
    let (query, pool) = perm.split_at(n_query);
    let n_train = s.train_size.unwrap_or(pool.len());
    let train = pool[..n_train].to_vec();
    let retrieval = if s.database_includes_train {
        pool.to_vec()
    } else {
        pool[n_train..].to_vec()
    };
    Split {
        train,
        query: query.to_vec(),
        retrieval,
    }
}
