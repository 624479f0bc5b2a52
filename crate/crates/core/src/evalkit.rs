//! Hamming-ranking retrieval evaluation.
//!
//! Relevance between a query and a database item means sharing at least one
//! label. Rankings sort by ascending Hamming distance with ties broken by
//! ascending database index.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMatrix;
use crate::error::{Error, Result};
use crate::hashnet::BinaryCodeMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Image queries against the text database.
    I2T,
    /// Text queries against the image database.
    T2I,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::I2T => "I2T",
            Direction::T2I => "T2I",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i2t" => Ok(Direction::I2T),
            "t2i" => Ok(Direction::T2I),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

/// `D = (K − ⟨a, b⟩) / 2` for codes over `{-1, +1}`.
pub fn hamming(a: &[i8], b: &[i8]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "code lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: i64 = a.iter().zip(b).map(|(&x, &y)| i64::from(x) * i64::from(y)).sum();
    Ok(((a.len() as i64 - dot) / 2) as u32)
}

/// Codes packed one bit per position (`+1 → 1`) for popcount distances.
#[derive(Debug, Clone)]
pub struct PackedCodes {
    words: usize,
    code_length: usize,
    data: Vec<u64>,
}

impl PackedCodes {
    pub fn new(codes: &BinaryCodeMatrix) -> Self {
        let k = codes.code_length();
        let words = k.div_ceil(64).max(1);
        let mut data = vec![0u64; codes.rows() * words];
        for (i, row) in codes.codes().outer_iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                if v > 0 {
                    data[i * words + b / 64] |= 1 << (b % 64);
                }
            }
        }
        Self {
            words,
            code_length: k,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.words
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.words..(i + 1) * self.words]
    }

    #[inline]
    pub fn distance(&self, i: usize, other: &PackedCodes, j: usize) -> u32 {
        self.row(i)
            .iter()
            .zip(other.row(j))
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Full database ordering for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RankedRetrieval {
    pub query_index: usize,
    pub ordering: Vec<usize>,
    pub distances: Vec<u32>,
}

fn rank_one(q: usize, query: &PackedCodes, db: &PackedCodes) -> RankedRetrieval {
    let k = query.code_length;
    let n = db.rows();
    let dist: Vec<u32> = (0..n).map(|j| query.distance(q, db, j)).collect();
    // counting sort keeps ascending index order inside each distance bucket
    let mut start = vec![0usize; k + 2];
    for &d in &dist {
        start[d as usize + 1] += 1;
    }
    for b in 1..start.len() {
        start[b] += start[b - 1];
    }
    let mut ordering = vec![0usize; n];
    for (j, &d) in dist.iter().enumerate() {
        let slot = &mut start[d as usize];
        ordering[*slot] = j;
        *slot += 1;
    }
    let distances = ordering.iter().map(|&j| dist[j]).collect();
    RankedRetrieval {
        query_index: q,
        ordering,
        distances,
    }
}

pub fn rank(query: &BinaryCodeMatrix, db: &BinaryCodeMatrix) -> Result<Vec<RankedRetrieval>> {
    if query.code_length() != db.code_length() {
        return Err(Error::Dimension(format!(
            "query code length {} differs from database {}",
            query.code_length(),
            db.code_length()
        )));
    }
    let (pq, pd) = (PackedCodes::new(query), PackedCodes::new(db));
    Ok((0..query.rows())
        .into_par_iter()
        .map(|q| rank_one(q, &pq, &pd))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cutoff {
    All,
    At(usize),
}

/// AP over a ranked relevance list truncated at `cutoff`.
///
/// The denominator counts relevant items inside the truncated list; a list
/// without any relevant item scores 0.
pub fn average_precision(relevance: &[bool], cutoff: Cutoff) -> f64 {
    let n = match cutoff {
        Cutoff::All => relevance.len(),
        Cutoff::At(k) => k.min(relevance.len()),
    };
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (r, _) in relevance[..n].iter().enumerate().filter(|(_, &rel)| rel) {
        hits += 1;
        acc += hits as f64 / (r + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}

/// Relevance flags of each ranked list, in rank order.
pub fn relevance_lists(
    ranked: &[RankedRetrieval],
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
) -> Result<Vec<Vec<bool>>> {
    if query_labels.classes() != db_labels.classes() {
        return Err(Error::Dimension("query and database label widths differ".into()));
    }
    let (ql, dl) = (query_labels.packed(), db_labels.packed());
    Ok(ranked
        .par_iter()
        .map(|r| {
            let q = &ql[r.query_index];
            r.ordering
                .iter()
                .map(|&j| q.iter().zip(&dl[j]).any(|(a, b)| a & b != 0))
                .collect()
        })
        .collect())
}

fn check_label_rows(codes: &BinaryCodeMatrix, labels: &LabelMatrix, side: &str) -> Result<()> {
    if codes.rows() != labels.rows() {
        return Err(Error::Dimension(format!(
            "{side} has {} codes but {} label rows",
            codes.rows(),
            labels.rows()
        )));
    }
    Ok(())
}

/// Mean AP over queries; queries with no relevant item count as 0.
pub fn map_eval(
    query: &BinaryCodeMatrix,
    db: &BinaryCodeMatrix,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
    cutoff: Cutoff,
) -> Result<f64> {
    check_label_rows(query, query_labels, "query")?;
    check_label_rows(db, db_labels, "database")?;
    let ranked = rank(query, db)?;
    let rel = relevance_lists(&ranked, query_labels, db_labels)?;
    Ok(mean_ap(&rel, cutoff))
}

fn mean_ap(rel: &[Vec<bool>], cutoff: Cutoff) -> f64 {
    if rel.is_empty() {
        return 0.0;
    }
    let aps: Vec<f64> = rel.par_iter().map(|r| average_precision(r, cutoff)).collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub radius: u32,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopkPoint {
    pub k: usize,
    pub precision: f64,
}

/// Precision/recall per Hamming radius and precision at each `k`.
///
/// At radius `r` a query retrieves every item within distance `r`. Precision
/// is averaged over queries that retrieve something, recall over queries
/// with at least one relevant item. Points whose mean recall is 0 or 1 are
/// dropped, as are points that do not strictly increase recall.
pub fn curves(
    ranked: &[RankedRetrieval],
    relevance: &[Vec<bool>],
    code_length: usize,
    k_grid: &[usize],
) -> Result<(Vec<PrPoint>, Vec<TopkPoint>)> {
    if k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("k grid must be strictly ascending".into()));
    }
    if ranked.len() != relevance.len() {
        return Err(Error::Dimension("ranked lists and relevance lists differ in count".into()));
    }
    let nq = ranked.len();

    let mut topk = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        if nq == 0 || k == 0 {
            continue;
        }
        let sum: f64 = relevance
            .iter()
            .map(|rel| {
                let n = k.min(rel.len());
                if n == 0 {
                    0.0
                } else {
                    rel[..n].iter().filter(|&&x| x).count() as f64 / n as f64
                }
            })
            .sum();
        topk.push(TopkPoint {
            k,
            precision: sum / nq as f64,
        });
    }

    // per query: relevant and retrieved counts at every radius
    let radii = code_length + 1;
    let mut prec_sum = vec![0.0; radii];
    let mut prec_n = vec![0usize; radii];
    let mut rec_sum = vec![0.0; radii];
    let mut rec_n = 0usize;
    for (r, rel) in ranked.iter().zip(relevance) {
        let total_rel = rel.iter().filter(|&&x| x).count();
        let mut ret = vec![0usize; radii];
        let mut hit = vec![0usize; radii];
        for (&d, &is_rel) in r.distances.iter().zip(rel) {
            ret[d as usize] += 1;
            hit[d as usize] += usize::from(is_rel);
        }
        let (mut cr, mut ch) = (0usize, 0usize);
        for rad in 0..radii {
            cr += ret[rad];
            ch += hit[rad];
            if cr > 0 {
                prec_sum[rad] += ch as f64 / cr as f64;
                prec_n[rad] += 1;
            }
            if total_rel > 0 {
                rec_sum[rad] += ch as f64 / total_rel as f64;
            }
        }
        if total_rel > 0 {
            rec_n += 1;
        }
    }
    let mut pr = Vec::new();
    if rec_n > 0 {
        let mut last = 0.0;
        for rad in 0..radii {
            if prec_n[rad] == 0 {
                continue;
            }
            let recall = rec_sum[rad] / rec_n as f64;
            let precision = prec_sum[rad] / prec_n[rad] as f64;
            if recall <= 0.0 || recall >= 1.0 || recall <= last {
                continue;
            }
            last = recall;
            pr.push(PrPoint {
                radius: rad as u32,
                recall,
                precision,
            });
        }
    }
    Ok((pr, topk))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub direction: Direction,
    pub code_length: usize,
    pub map_all: f64,
    pub map_at: BTreeMap<usize, f64>,
    pub pr_curve: Vec<PrPoint>,
    pub topk_curve: Vec<TopkPoint>,
}

impl EvalReport {
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for p in &self.pr_curve {
            writeln!(s, "{},{}", p.recall, p.precision).expect("write to string");
        }
        s
    }

    pub fn topk_csv(&self) -> String {
        let mut s = String::from("k,precision\n");
        for p in &self.topk_curve {
            writeln!(s, "{},{}", p.k, p.precision).expect("write to string");
        }
        s
    }
}

/// Evaluation settings shared by every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EvalSettings {
    pub map_cutoffs: Vec<usize>,
    pub k_grid: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            map_cutoffs: vec![50],
            k_grid: vec![1, 50, 100, 200, 400, 600, 800, 1000],
        }
    }
}

pub fn evaluate(
    direction: Direction,
    query: &BinaryCodeMatrix,
    db: &BinaryCodeMatrix,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    check_label_rows(query, query_labels, "query")?;
    check_label_rows(db, db_labels, "database")?;
    let ranked = rank(query, db)?;
    let rel = relevance_lists(&ranked, query_labels, db_labels)?;
    let map_at = settings
        .map_cutoffs
        .iter()
        .map(|&k| (k, mean_ap(&rel, Cutoff::At(k))))
        .collect();
    let (pr_curve, topk_curve) = curves(&ranked, &rel, query.code_length(), &settings.k_grid)?;
    Ok(EvalReport {
        direction,
        code_length: query.code_length(),
        map_all: mean_ap(&rel, Cutoff::All),
        map_at,
        pr_curve,
        topk_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::parse_labels;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codes(v: Array2<i8>) -> BinaryCodeMatrix {
        BinaryCodeMatrix::new(v).unwrap()
    }

    fn random_codes(rng: &mut ChaCha8Rng, n: usize, k: usize) -> BinaryCodeMatrix {
        codes(Array2::from_shape_simple_fn((n, k), || if rng.random_bool(0.5) { 1 } else { -1 }))
    }

    #[test]
    fn hamming_examples() {
        let a = [1i8, 1, -1, -1];
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert_eq!(hamming(&a, &[-1, -1, 1, 1]).unwrap(), 4);
        assert_eq!(hamming(&a, &[1, -1, 1, -1]).unwrap(), 2);
        assert!(hamming(&a, &[1]).is_err());
    }

    #[test]
    fn rank_examples() {
        let q = codes(array![[1i8, 1, 1]]);
        let r = rank(&q, &codes(array![[-1i8, 1, 1]])).unwrap();
        assert_eq!(r[0].ordering, vec![0]);
        let db = codes(array![[-1i8, -1, -1], [1, 1, 1], [-1, -1, -1]]);
        let r = rank(&q, &db).unwrap();
        assert_eq!(r[0].ordering, vec![1, 0, 2]);
        assert_eq!(r[0].distances, vec![0, 3, 3]);
        assert!(rank(&q, &codes(array![[1i8, 1]])).is_err());
    }

    #[test]
    fn rank_matches_naive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_codes(&mut rng, 20, 8);
        let db = random_codes(&mut rng, 50, 8);
        let ranked = rank(&q, &db).unwrap();
        for (i, r) in ranked.iter().enumerate() {
            let mut naive: Vec<(u32, usize)> = (0..50)
                .map(|j| {
                    let qa = q.codes().row(i).to_vec();
                    let da = db.codes().row(j).to_vec();
                    (hamming(&qa, &da).unwrap(), j)
                })
                .collect();
            naive.sort();
            assert_eq!(r.ordering, naive.iter().map(|p| p.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false], Cutoff::All), 1.0);
        assert_eq!(average_precision(&[false, true], Cutoff::All), 0.5);
        let ap = average_precision(&[true, false, true], Cutoff::All);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false, true], Cutoff::At(2)), 0.0);
        assert_eq!(average_precision(&[false, true, true], Cutoff::At(2)), 0.5);
    }

    #[test]
    fn small_fixture_map() {
        let q = codes(array![[1i8, 1], [-1, -1], [1, -1]]);
        let db = codes(array![[1i8, 1], [1, -1], [-1, 1], [-1, -1], [1, 1]]);
        let ql = parse_labels("1,0\n0,1\n1,1\n").unwrap();
        let dl = parse_labels("1,0\n0,1\n1,0\n0,1\n0,1\n").unwrap();
        // q0 ranks 0,4 | 1,2 | 3 -> rel 1,0,0,1,0 -> (1 + 2/4)/2
        // q1 ranks 3 | 1,2 | 0,4 -> rel 1,1,0,0,1 -> (1 + 1 + 3/5)/3
        // q2 everything relevant -> 1
        let expected = ((1.0 + 0.5) / 2.0 + (2.0 + 0.6) / 3.0 + 1.0) / 3.0;
        let got = map_eval(&q, &db, &ql, &dl, Cutoff::All).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_retrieval() {
        let q = codes(array![[1i8, 1], [-1, -1]]);
        let db = codes(array![[1i8, 1], [-1, -1], [1, 1]]);
        let ql = parse_labels("1,0\n0,1\n").unwrap();
        let dl = parse_labels("1,0\n0,1\n1,0\n").unwrap();
        assert_eq!(map_eval(&q, &db, &ql, &dl, Cutoff::All).unwrap(), 1.0);
        let r = evaluate(Direction::I2T, &q, &db, &ql, &dl, &EvalSettings { map_cutoffs: vec![1], k_grid: vec![1] }).unwrap();
        assert_eq!(r.topk_curve, vec![TopkPoint { k: 1, precision: 1.0 }]);
    }

    #[test]
    fn topk_hand_example() {
        let ranked = vec![RankedRetrieval { query_index: 0, ordering: vec![0, 1, 2, 3], distances: vec![0, 1, 2, 3] }];
        let rel = vec![vec![true, false, true, false]];
        let (_, topk) = curves(&ranked, &rel, 3, &[2, 4]).unwrap();
        assert_eq!(topk.iter().map(|p| p.precision).collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert!(curves(&ranked, &rel, 3, &[4, 2]).is_err());
    }

    #[test]
    fn pr_curve_matches_per_threshold_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = 6;
        let q = random_codes(&mut rng, 15, k);
        let db = random_codes(&mut rng, 40, k);
        let lab = |rng: &mut ChaCha8Rng, n: usize| {
            let rows: Vec<String> = (0..n)
                .map(|_| if rng.random_bool(0.5) { "1,0".to_string() } else { "0,1".to_string() })
                .collect();
            parse_labels(&rows.join("\n")).unwrap()
        };
        let (ql, dl) = (lab(&mut rng, 15), lab(&mut rng, 40));
        let ranked = rank(&q, &db).unwrap();
        let rel = relevance_lists(&ranked, &ql, &dl).unwrap();
        let (pr, _) = curves(&ranked, &rel, k, &[1]).unwrap();
        assert!(!pr.is_empty());
        for p in &pr {
            let (mut ps, mut pn, mut rs, mut rn) = (0.0, 0, 0.0, 0);
            for i in 0..15 {
                let qa = q.codes().row(i).to_vec();
                let (mut ret, mut hit, mut total) = (0, 0, 0);
                for j in 0..40 {
                    let d = hamming(&qa, &db.codes().row(j).to_vec()).unwrap();
                    let relevant = ql.values().row(i) == dl.values().row(j);
                    total += usize::from(relevant);
                    if d <= p.radius {
                        ret += 1;
                        hit += usize::from(relevant);
                    }
                }
                if ret > 0 {
                    ps += hit as f64 / ret as f64;
                    pn += 1;
                }
                if total > 0 {
                    rs += hit as f64 / total as f64;
                    rn += 1;
                }
            }
            assert!((p.precision - ps / pn as f64).abs() < 1e-12);
            assert!((p.recall - rs / rn as f64).abs() < 1e-12);
            assert!(p.recall > 0.0 && p.recall < 1.0);
        }
        assert!(pr.windows(2).all(|w| w[0].recall < w[1].recall));
    }

    #[test]
    fn random_codes_score_near_prior() {
        let mut total = 0.0;
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_codes(&mut rng, 200, 32);
            let db = random_codes(&mut rng, 800, 32);
            let rows = |n: usize, offset: usize| {
                (0..n).map(|i| if (i + offset) % 2 == 0 { "1,0" } else { "0,1" }).collect::<Vec<_>>().join("\n")
            };
            let ql = parse_labels(&rows(200, 0)).unwrap();
            let dl = parse_labels(&rows(800, 1)).unwrap();
            let map = map_eval(&q, &db, &ql, &dl, Cutoff::All).unwrap();
            assert!((map - 0.5).abs() < 0.05, "seed {seed}: {map}");
            total += map;
        }
        assert!((total / 3.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn report_csv_headers() {
        let r = EvalReport {
            direction: Direction::T2I,
            code_length: 4,
            map_all: 0.5,
            map_at: BTreeMap::new(),
            pr_curve: vec![PrPoint { radius: 1, recall: 0.25, precision: 0.75 }],
            topk_curve: vec![TopkPoint { k: 5, precision: 0.4 }],
        };
        assert_eq!(r.pr_csv(), "recall,precision\n0.25,0.75\n");
        assert_eq!(r.topk_csv(), "k,precision\n5,0.4\n");
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"direction\":\"T2I\""));
    }

    proptest::proptest! {
        #[test]
        fn hamming_is_a_metric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..40);
            let mut draw = || (0..k).map(|_| if rng.random_bool(0.5) { 1i8 } else { -1 }).collect::<Vec<_>>();
            let (a, b, c) = (draw(), draw(), draw());
            let (ab, ba) = (hamming(&a, &b).unwrap(), hamming(&b, &a).unwrap());
            proptest::prop_assert_eq!(ab, ba);
            proptest::prop_assert_eq!(ab == 0, a == b);
            proptest::prop_assert!(hamming(&a, &c).unwrap() <= ab + hamming(&b, &c).unwrap());
        }

        #[test]
        fn ap_bounds(rel in proptest::collection::vec(proptest::bool::ANY, 1..30)) {
            let ap = average_precision(&rel, Cutoff::All);
            proptest::prop_assert!((0.0..=1.0).contains(&ap));
            let first_irrelevant = rel.iter().position(|&x| !x).unwrap_or(rel.len());
            let sorted = rel[first_irrelevant..].iter().all(|&x| !x);
            let any = rel.iter().any(|&x| x);
            proptest::prop_assert_eq!(ap == 1.0, any && sorted);
        }
    }
}
