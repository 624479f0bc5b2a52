//! Binary correlation mining over KNN neighbourhoods.
//!
//! First-order adjacency is KNN membership under a cosine similarity.
//! Second-order relations connect two instances when their neighbourhoods
//! overlap in at least `tau` members, within a modality or across the two.
//! During training the same procedure runs on hidden embeddings and the
//! result is unioned into the running set.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMatrix;
use crate::error::{Error, Result};
use crate::simgraph::{cosine_of_rows, NeighborTable, SimilarityMatrix};

/// Square bit matrix, rows packed into 64-bit words.
#[derive(Clone, PartialEq, Eq)]
pub struct BitMatrix {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BitMatrix({}x{}, {} set)", self.n, self.n, self.count_ones())
    }
}

impl BitMatrix {
    pub fn new(n: usize) -> Self {
        let words = n.div_ceil(64);
        Self {
            n,
            words,
            bits: vec![0; n * words],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::new(n);
        m.set_diagonal();
        m
    }

    pub fn full(n: usize) -> Self {
        let mut m = Self::new(n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j);
            }
        }
        m
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(n);
        for i in 0..n {
            for j in 0..n {
                if f(i, j) {
                    m.set(i, j);
                }
            }
        }
        m
    }

    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
    }

    pub fn set_diagonal(&mut self) {
        for i in 0..self.n {
            self.set(i, i);
        }
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, u64> {
        self.bits.chunks_exact_mut(self.words.max(1))
    }

    pub fn row_ones(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        ones(self.row(i))
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::new(self.n);
        for i in 0..self.n {
            for j in self.row_ones(i) {
                t.set(j, i);
            }
        }
        t
    }

    pub fn union_with(&mut self, other: &BitMatrix) {
        assert_eq!(self.n, other.n, "bit matrix orders differ");
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn is_subset_of(&self, other: &BitMatrix) -> bool {
        self.n == other.n && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row_ones(i).all(|j| self.get(j, i)))
    }

    /// Dense 0/1 sub-matrix at `indices × indices`.
    pub fn slice(&self, indices: &[usize]) -> Array2<f64> {
        let m = indices.len();
        let mut out = Array2::zeros((m, m));
        for (a, &i) in indices.iter().enumerate() {
            for (b, &j) in indices.iter().enumerate() {
                if self.get(i, j) {
                    out[[a, b]] = 1.0;
                }
            }
        }
        out
    }
}

fn ones(words: &[u64]) -> impl Iterator<Item = usize> + '_ {
    words.iter().enumerate().flat_map(|(w, &word)| {
        let mut rest = word;
        std::iter::from_fn(move || {
            if rest == 0 {
                return None;
            }
            let b = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(w * 64 + b)
        })
    })
}

/// First-order KNN membership: row `i` has ones exactly at `NN_Kr(i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix(BitMatrix);

impl AdjacencyMatrix {
    pub fn from_bits(bits: BitMatrix) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &BitMatrix {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.order()
    }
}

pub fn knn_adjacency(s: ArrayView2<f64>, kr: usize) -> AdjacencyMatrix {
    let table = NeighborTable::build(s, kr);
    let mut bits = BitMatrix::new(table.order());
    for (i, nn) in table.rows().enumerate() {
        for &j in nn {
            bits.set(i, j);
        }
    }
    AdjacencyMatrix(bits)
}

/// `out[i][j] = max(|A_i ∩ B_j|, |B_i ∩ A_j|) ≥ tau`.
///
/// `A = B` gives the intra-modal relation; the max makes the result symmetric.
pub fn second_order(a: &AdjacencyMatrix, b: &AdjacencyMatrix, tau: usize) -> Result<BitMatrix> {
    if a.order() != b.order() {
        return Err(Error::Dimension(format!(
            "adjacency orders differ: {} vs {}",
            a.order(),
            b.order()
        )));
    }
    if tau == 0 {
        return Err(Error::Config("tau must be >= 1".into()));
    }
    let (a, b) = (&a.0, &b.0);
    let mut out = BitMatrix::new(a.order());
    if tau == 1 {
        // any shared neighbour: OR of transposed rows over each neighbourhood
        let (at, bt) = (a.transpose(), b.transpose());
        out.rows_mut().enumerate().par_bridge().for_each(|(i, dst)| {
            for k in a.row_ones(i) {
                for (d, s) in dst.iter_mut().zip(bt.row(k)) {
                    *d |= s;
                }
            }
            for k in b.row_ones(i) {
                for (d, s) in dst.iter_mut().zip(at.row(k)) {
                    *d |= s;
                }
            }
        });
    } else {
        let tau = tau as u32;
        let n = a.order();
        out.rows_mut().enumerate().par_bridge().for_each(|(i, dst)| {
            let (ai, bi) = (a.row(i), b.row(i));
            for j in 0..n {
                let ab: u32 = ai.iter().zip(b.row(j)).map(|(x, y)| (x & y).count_ones()).sum();
                let ba: u32 = bi.iter().zip(a.row(j)).map(|(x, y)| (x & y).count_ones()).sum();
                if ab.max(ba) >= tau {
                    dst[j / 64] |= 1 << (j % 64);
                }
            }
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MiningMode {
    /// Union of intra-image, intra-text and cross-modal shared-neighbour relations.
    #[default]
    SecondOrder,
    /// Symmetrized first-order KNN membership of either modality.
    Pairwise,
}

/// Symmetric, reflexive binary correlation set with its update round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationSet {
    bits: BitMatrix,
    epoch: usize,
}

impl CorrelationSet {
    pub fn identity(n: usize) -> Self {
        Self {
            bits: BitMatrix::identity(n),
            epoch: 0,
        }
    }

    pub fn from_bits(mut bits: BitMatrix, epoch: usize) -> Self {
        bits.set_diagonal();
        Self { bits, epoch }
    }

    pub fn bits(&self) -> &BitMatrix {
        &self.bits
    }

    pub fn order(&self) -> usize {
        self.bits.order()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn count(&self) -> u64 {
        self.bits.count_ones()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits.get(i, j)
    }

    pub fn slice(&self, indices: &[usize]) -> Array2<f64> {
        self.bits.slice(indices)
    }

    /// Every set `(i, j)` as CSV lines under an `i,j` header.
    pub fn to_pair_csv(&self) -> String {
        let mut out = String::from("i,j\n");
        for i in 0..self.order() {
            for j in self.bits.row_ones(i) {
                writeln!(out, "{i},{j}").expect("write to string");
            }
        }
        out
    }
}

/// Mining parameters plus a tally of second-order products computed.
#[derive(Debug, Clone)]
pub struct CorrelationMiner {
    pub kr: usize,
    pub tau: usize,
    pub mode: MiningMode,
    second_order_calls: usize,
}

impl CorrelationMiner {
    pub fn new(kr: usize, tau: usize, mode: MiningMode) -> Self {
        Self {
            kr,
            tau,
            mode,
            second_order_calls: 0,
        }
    }

    pub fn second_order_calls(&self) -> usize {
        self.second_order_calls
    }

    /// Relation mined from two cosine similarity matrices (not yet unioned
    /// with anything, diagonal forced).
    pub fn mine(&mut self, si: &SimilarityMatrix, st: &SimilarityMatrix) -> Result<BitMatrix> {
        if si.order() != st.order() {
            return Err(Error::Dimension(format!(
                "similarity orders differ: {} vs {}",
                si.order(),
                st.order()
            )));
        }
        let ai = knn_adjacency(si.values().view(), self.kr);
        let at = knn_adjacency(st.values().view(), self.kr);
        let mut r = match self.mode {
            MiningMode::SecondOrder => {
                let mut r = second_order(&ai, &ai, self.tau)?;
                r.union_with(&second_order(&at, &at, self.tau)?);
                r.union_with(&second_order(&ai, &at, self.tau)?);
                self.second_order_calls += 3;
                r
            }
            MiningMode::Pairwise => {
                let mut r = ai.0.clone();
                r.union_with(&ai.0.transpose());
                r.union_with(&at.0);
                r.union_with(&at.0.transpose());
                r
            }
        };
        r.set_diagonal();
        Ok(r)
    }

    pub fn init(&mut self, si: &SimilarityMatrix, st: &SimilarityMatrix) -> Result<CorrelationSet> {
        Ok(CorrelationSet {
            bits: self.mine(si, st)?,
            epoch: 0,
        })
    }

    /// `R_e = R_{e-1} ∪ mined(cos(Hi), cos(Ht))`; never clears a bit.
    pub fn update(
        &mut self,
        r: &CorrelationSet,
        hi: ArrayView2<f64>,
        ht: ArrayView2<f64>,
    ) -> Result<CorrelationSet> {
        if hi.nrows() != r.order() || ht.nrows() != r.order() {
            return Err(Error::Dimension(format!(
                "hidden rows ({}, {}) do not match correlation order {}",
                hi.nrows(),
                ht.nrows(),
                r.order()
            )));
        }
        let si = cosine_of_rows(hi).map_err(hidden_divergence("image"))?;
        let st = cosine_of_rows(ht).map_err(hidden_divergence("text"))?;
        let mut bits = r.bits.clone();
        bits.union_with(&self.mine(&si, &st)?);
        Ok(CorrelationSet {
            bits,
            epoch: r.epoch + 1,
        })
    }
}

fn hidden_divergence(modality: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::ZeroNormRow { row } => Error::Divergence(format!(
            "{modality} hidden embedding row {row} has zero norm"
        )),
        other => other,
    }
}

pub fn init_correlations(
    si: &SimilarityMatrix,
    st: &SimilarityMatrix,
    kr: usize,
    tau: usize,
) -> Result<CorrelationSet> {
    CorrelationMiner::new(kr, tau, MiningMode::SecondOrder).init(si, st)
}

pub fn adaptive_update(
    r: &CorrelationSet,
    hi: ArrayView2<f64>,
    ht: ArrayView2<f64>,
    kr: usize,
    tau: usize,
) -> Result<CorrelationSet> {
    CorrelationMiner::new(kr, tau, MiningMode::SecondOrder).update(r, hi, ht)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CorrelationStats {
    pub count: u64,
    pub off_diagonal: u64,
    pub precision: f64,
    /// Set when there are no off-diagonal pairs; precision is then reported as 1.
    pub no_off_diagonal_pairs: bool,
}

/// Popcount of R and the fraction of off-diagonal pairs sharing a label.
pub fn correlation_stats(r: &CorrelationSet, labels: &LabelMatrix) -> Result<CorrelationStats> {
    if labels.rows() != r.order() {
        return Err(Error::Dimension(format!(
            "labels have {} rows, correlation order is {}",
            labels.rows(),
            r.order()
        )));
    }
    let packed = labels.packed();
    let (hits, off) = (0..r.order())
        .into_par_iter()
        .map(|i| {
            let (mut hits, mut off) = (0u64, 0u64);
            for j in r.bits.row_ones(i).filter(|&j| j != i) {
                off += 1;
                if packed[i].iter().zip(&packed[j]).any(|(a, b)| a & b != 0) {
                    hits += 1;
                }
            }
            (hits, off)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(CorrelationStats {
        count: r.count(),
        off_diagonal: off,
        precision: if off == 0 { 1.0 } else { hits as f64 / off as f64 },
        no_off_diagonal_pairs: off == 0,
    })
}
