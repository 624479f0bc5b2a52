//! Structural semantic similarity construction.
//!
//! Pipeline: per-modality cosine → probability in `[0, 1]` → probabilistic-OR
//! fusion → top-`Ks` row normalization → structural product `Ks·Ŝ·Ŝᵀ` →
//! convex mixture with the fused similarity, mapped back to `[-1, 1]`.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_assf_raw, FeatureMatrix};
use crate::error::{Error, Result};

const RANGE_SLACK: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    Probability,
    Fused,
    Structural,
    Semantic,
}

impl SimilarityKind {
    pub fn range(self) -> (f64, f64) {
        match self {
            SimilarityKind::Cosine | SimilarityKind::Semantic => (-1.0, 1.0),
            _ => (0.0, 1.0),
        }
    }

    fn symmetric(self) -> bool {
        !matches!(self, SimilarityKind::Probability)
    }
}

/// Square similarity matrix tagged with the stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    kind: SimilarityKind,
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn from_parts(kind: SimilarityKind, values: Array2<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Dimension(format!(
                "similarity matrix must be square, got {:?}",
                values.dim()
            )));
        }
        let s = Self { kind, values };
        s.check_invariants()?;
        Ok(s)
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn check_invariants(&self) -> Result<()> {
        let (lo, hi) = self.kind.range();
        for ((i, j), &v) in self.values.indexed_iter() {
            if !(v >= lo - RANGE_SLACK && v <= hi + RANGE_SLACK) {
                return Err(Error::format(
                    "similarity matrix",
                    format!("{:?} entry ({i},{j}) = {v} outside [{lo},{hi}]", self.kind),
                ));
            }
            if self.kind.symmetric() && (v - self.values[[j, i]]).abs() > SYMMETRY_TOL {
                return Err(Error::format(
                    "similarity matrix",
                    format!("{:?} not symmetric at ({i},{j})", self.kind),
                ));
            }
        }
        if self.kind == SimilarityKind::Cosine {
            if let Some(i) = (0..self.order()).find(|&i| (self.values[[i, i]] - 1.0).abs() > RANGE_SLACK) {
                return Err(Error::format(
                    "similarity matrix",
                    format!("cosine diagonal entry {i} is not 1"),
                ));
            }
        }
        Ok(())
    }

    /// ASSF dump, narrowed to f32, for offline inspection.
    pub fn to_assf_bytes(&self) -> Vec<u8> {
        write_assf_raw(&self.values.mapv(|v| v as f32))
    }
}

/// Rows scaled to unit norm; fails on a zero row.
pub fn normalize_rows(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (row, mut r) in out.outer_iter_mut().enumerate() {
        let n = r.dot(&r).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNormRow { row });
        }
        r /= n;
    }
    Ok(out)
}

/// Pairwise cosine of the rows of `x`: exactly symmetric, unit diagonal.
pub fn cosine_of_rows(x: ArrayView2<f64>) -> Result<SimilarityMatrix> {
    let n = normalize_rows(x)?;
    let mut g = n.dot(&n.t());
    let m = g.nrows();
    for i in 0..m {
        g[[i, i]] = 1.0;
        for j in i + 1..m {
            let v = g[[i, j]].clamp(-1.0, 1.0);
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix {
        kind: SimilarityKind::Cosine,
        values: g,
    })
}

pub fn cosine_matrix(features: &FeatureMatrix) -> SimilarityMatrix {
    cosine_of_rows(features.to_f64().view()).expect("feature rows have positive norm")
}

/// Affine map `[-1, 1] → [0, 1]`, `p = (s + 1) / 2`.
pub fn probability_map(s: &SimilarityMatrix) -> Result<SimilarityMatrix> {
    expect_kind(s, SimilarityKind::Cosine)?;
    Ok(SimilarityMatrix {
        kind: SimilarityKind::Probability,
        values: s.values.mapv(|v| (v + 1.0) * 0.5),
    })
}

/// Probabilistic OR of two independent per-modality probabilities.
pub fn fuse(pi: &SimilarityMatrix, pt: &SimilarityMatrix) -> Result<SimilarityMatrix> {
    expect_kind(pi, SimilarityKind::Probability)?;
    expect_kind(pt, SimilarityKind::Probability)?;
    same_order(pi, pt)?;
    let values = Zip::from(&pi.values)
        .and(&pt.values)
        .map_collect(|&a, &b| a + b - a * b);
    Ok(SimilarityMatrix {
        kind: SimilarityKind::Fused,
        values,
    })
}

/// Ordered nearest-neighbour lists, one per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborTable {
    /// Top-`k` by descending similarity, ties broken by ascending index.
    /// `k` is clamped to the matrix order; the row itself is a candidate.
    pub fn build(s: ArrayView2<f64>, k: usize) -> Self {
        let m = s.nrows();
        let k = clamp_k(k, m, "neighbourhood size");
        let neighbors = (0..m)
            .into_par_iter()
            .map(|i| top_k_row(s.row(i), k))
            .collect();
        Self { k, neighbors }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn order(&self) -> usize {
        self.neighbors.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.neighbors.iter().map(Vec::as_slice)
    }
}

fn top_k_row(row: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering { row[*b].total_cmp(&row[*a]).then(a.cmp(b)) };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

pub(crate) fn clamp_k(k: usize, order: usize, what: &str) -> usize {
    if k == 0 {
        log::warn!("{what} 0 raised to 1");
        return 1.min(order);
    }
    if k > order {
        log::warn!("{what} {k} exceeds order {order}; clamped");
        return order;
    }
    k
}

/// Row-normalized top-`Ks` restriction `Ŝ` of a fused similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct RowNormalized {
    ks: usize,
    values: Array2<f64>,
}

impl RowNormalized {
    pub fn ks(&self) -> usize {
        self.ks
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn from_values(values: Array2<f64>, ks: usize) -> Self {
        Self { ks, values }
    }
}

pub fn topk_normalize(sf: &SimilarityMatrix, ks: usize) -> Result<RowNormalized> {
    expect_kind(sf, SimilarityKind::Fused)?;
    let table = NeighborTable::build(sf.values.view(), ks);
    let m = sf.order();
    let mut out = Array2::zeros((m, m));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut dst)| {
            let src = sf.values.row(i);
            let nn = table.row(i);
            let mass: f64 = nn.iter().map(|&j| src[j]).sum();
            assert!(mass > 0.0, "row {i} has zero top-Ks mass");
            for &j in nn {
                dst[j] = src[j] / mass;
            }
        });
    Ok(RowNormalized {
        ks: table.k(),
        values: out,
    })
}

/// `Ks · Ŝ · Ŝᵀ`, clipped to `[0, 1]`; exactly symmetric.
pub fn structural(normalized: &RowNormalized, ks: usize) -> SimilarityMatrix {
    let m = normalized.values.nrows();
    let scale = clamp_k(ks, m, "Ks") as f64;
    let mut p = normalized.values.dot(&normalized.values.t());
    for i in 0..m {
        p[[i, i]] = (scale * p[[i, i]]).clamp(0.0, 1.0);
        for j in i + 1..m {
            let v = (scale * p[[i, j]]).clamp(0.0, 1.0);
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    SimilarityMatrix {
        kind: SimilarityKind::Structural,
        values: p,
    }
}

/// `S = 2·((1−γ)·S_fused + γ·S_structural) − 1`.
pub fn combine(
    sf: &SimilarityMatrix,
    sst: &SimilarityMatrix,
    gamma: f64,
) -> Result<SimilarityMatrix> {
    check_gamma(gamma)?;
    expect_kind(sf, SimilarityKind::Fused)?;
    expect_kind(sst, SimilarityKind::Structural)?;
    same_order(sf, sst)?;
    let values = Zip::from(&sf.values)
        .and(&sst.values)
        .map_collect(|&f, &s| 2.0 * ((1.0 - gamma) * f + gamma * s) - 1.0);
    Ok(SimilarityMatrix {
        kind: SimilarityKind::Semantic,
        values,
    })
}

/// Fused similarity of two modalities (first three pipeline stages).
pub fn fused_similarity(fi: &FeatureMatrix, ft: &FeatureMatrix) -> Result<SimilarityMatrix> {
    if fi.rows() != ft.rows() {
        return Err(Error::Dimension(format!(
            "image has {} rows, text has {}",
            fi.rows(),
            ft.rows()
        )));
    }
    let pi = probability_map(&cosine_matrix(fi))?;
    let pt = probability_map(&cosine_matrix(ft))?;
    fuse(&pi, &pt)
}

/// Full semantic similarity from raw features.
pub fn build_semantic(
    fi: &FeatureMatrix,
    ft: &FeatureMatrix,
    ks: usize,
    gamma: f64,
) -> Result<SimilarityMatrix> {
    check_gamma(gamma)?;
    let sf = fused_similarity(fi, ft)?;
    semantic_from_fused(&sf, ks, gamma)
}

pub fn semantic_from_fused(sf: &SimilarityMatrix, ks: usize, gamma: f64) -> Result<SimilarityMatrix> {
    check_gamma(gamma)?;
    if gamma == 0.0 {
        // the structural term has zero weight; skip the M³ product
        expect_kind(sf, SimilarityKind::Fused)?;
        return Ok(SimilarityMatrix {
            kind: SimilarityKind::Semantic,
            values: sf.values.mapv(|f| 2.0 * f - 1.0),
        });
    }
    let sst = structural(&topk_normalize(sf, ks)?, ks);
    combine(sf, &sst, gamma)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0, 1], got {gamma}")));
    }
    Ok(())
}

fn expect_kind(s: &SimilarityMatrix, kind: SimilarityKind) -> Result<()> {
    if s.kind != kind {
        return Err(Error::format(
            "similarity matrix",
            format!("expected {kind:?}, got {:?}", s.kind),
        ));
    }
    Ok(())
}

fn same_order(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<()> {
    if a.order() != b.order() {
        return Err(Error::Dimension(format!(
            "similarity orders differ: {} vs {}",
            a.order(),
            b.order()
        )));
    }
    Ok(())
}
