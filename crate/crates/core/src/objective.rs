//! Batch losses over cosine similarity matrices of continuous codes and
//! their gradients with respect to those codes.
//!
//! With `C_IT = cos(Hi, Ht)`, `C_II = cos(Hi, Hi)`, `C_TT = cos(Ht, Ht)`:
//!
//! * reconstruction `L_sr = ‖S − C_IT‖² + ‖S − C_II‖² + ‖S − C_TT‖²`
//! * alignment `L_sa = ‖C_II − C_TT‖² + ‖C_IT − C_II‖² + ‖C_IT − C_TT‖²`
//! * correlation `L_cp = ‖C_IT ∘ R − β R‖²`
//!
//! Norms are raw sums over the `m²` entries. The total is
//! `L_sr + μ₁ L_cp + μ₂ L_sa`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu1: 2.0,
            mu2: 1.0,
            beta: 1.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = self.mu1.is_finite() && self.mu2.is_finite() && self.beta.is_finite();
        if !finite || self.mu1 < 0.0 || self.mu2 < 0.0 || self.beta < 1.0 {
            return Err(Error::Config(format!(
                "loss weights need mu1 >= 0, mu2 >= 0, beta >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which side is held constant (binary codes of the other modality).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Freeze {
    #[default]
    None,
    FreezeImage,
    FreezeText,
}

/// Sampled batch with its semantic-similarity and correlation sub-matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSlice {
    pub indices: Vec<usize>,
    pub similarity: Array2<f64>,
    pub correlation: Array2<f64>,
}

impl BatchSlice {
    pub fn new(indices: Vec<usize>, similarity: Array2<f64>, correlation: Array2<f64>) -> Result<Self> {
        let m = indices.len();
        if similarity.dim() != (m, m) || correlation.dim() != (m, m) {
            return Err(Error::Dimension(format!(
                "batch of {m} needs {m}x{m} slices, got {:?} and {:?}",
                similarity.dim(),
                correlation.dim()
            )));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("batch", "repeated index"));
        }
        Ok(Self {
            indices,
            similarity,
            correlation,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub correlation: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: LossBreakdown,
    pub grad_image: Array2<f64>,
    pub grad_text: Array2<f64>,
}

struct Normalized {
    unit: Array2<f64>,
    norms: Array1<f64>,
}

fn normalize(x: ArrayView2<f64>, side: &str) -> Result<Normalized> {
    let mut unit = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Divergence(format!("zero-norm row {i} in {side} codes")));
        }
        row /= n;
        norms[i] = n;
    }
    Ok(Normalized { unit, norms })
}

/// `out[i][j] = cos(a_i, b_j)`.
pub fn pairwise_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "code lengths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let na = normalize(a, "left")?;
    let nb = normalize(b, "right")?;
    Ok(na.unit.dot(&nb.unit.t()))
}

fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

fn check_pair(hi: &ArrayView2<f64>, ht: &ArrayView2<f64>) -> Result<()> {
    if hi.dim() != ht.dim() {
        return Err(Error::Dimension(format!(
            "image codes {:?} and text codes {:?} differ in shape",
            hi.dim(),
            ht.dim()
        )));
    }
    Ok(())
}

fn check_square(name: &str, x: &ArrayView2<f64>, m: usize) -> Result<()> {
    if x.dim() != (m, m) {
        return Err(Error::Dimension(format!("{name} must be {m}x{m}, got {:?}", x.dim())));
    }
    Ok(())
}

struct Cosines {
    img: Normalized,
    txt: Normalized,
    it: Array2<f64>,
    ii: Array2<f64>,
    tt: Array2<f64>,
}

fn cosines(hi: ArrayView2<f64>, ht: ArrayView2<f64>) -> Result<Cosines> {
    check_pair(&hi, &ht)?;
    let img = normalize(hi, "image")?;
    let txt = normalize(ht, "text")?;
    let it = img.unit.dot(&txt.unit.t());
    let ii = img.unit.dot(&img.unit.t());
    let tt = txt.unit.dot(&txt.unit.t());
    Ok(Cosines { img, txt, it, ii, tt })
}

fn reconstruction(c: &Cosines, s: &Array2<f64>) -> f64 {
    sq_dist(s, &c.it) + sq_dist(s, &c.ii) + sq_dist(s, &c.tt)
}

fn alignment(c: &Cosines) -> f64 {
    sq_dist(&c.ii, &c.tt) + sq_dist(&c.it, &c.ii) + sq_dist(&c.it, &c.tt)
}

fn correlation(c: &Cosines, r: &ArrayView2<f64>, beta: f64) -> f64 {
    Zip::from(&c.it).and(r).fold(0.0, |acc, &x, &rij| {
        let d = x * rij - beta * rij;
        acc + d * d
    })
}

pub fn loss_sr(hi: ArrayView2<f64>, ht: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<f64> {
    check_square("similarity slice", &s, hi.nrows())?;
    Ok(reconstruction(&cosines(hi, ht)?, &s.to_owned()))
}

pub fn loss_sa(hi: ArrayView2<f64>, ht: ArrayView2<f64>) -> Result<f64> {
    Ok(alignment(&cosines(hi, ht)?))
}

pub fn loss_cp(hi: ArrayView2<f64>, ht: ArrayView2<f64>, r: ArrayView2<f64>, beta: f64) -> Result<f64> {
    check_square("correlation slice", &r, hi.nrows())?;
    Ok(correlation(&cosines(hi, ht)?, &r, beta))
}

/// Back-propagates `g = ∂L/∂û` through `û = u / ‖u‖` row by row.
fn through_normalization(g: Array2<f64>, n: &Normalized) -> Array2<f64> {
    let mut out = g;
    for ((mut row, unit), &norm) in out
        .axis_iter_mut(Axis(0))
        .zip(n.unit.axis_iter(Axis(0)))
        .zip(n.norms.iter())
    {
        let radial = row.dot(&unit);
        Zip::from(&mut row).and(&unit).for_each(|g, &u| *g = (*g - radial * u) / norm);
    }
    out
}

/// Total loss and exact gradients w.r.t. both code matrices.
///
/// A frozen side is treated as a constant input: it enters the loss with
/// its given values and its returned gradient is identically zero.
pub fn total_loss_and_grads(
    hi: ArrayView2<f64>,
    ht: ArrayView2<f64>,
    batch: &BatchSlice,
    w: &LossWeights,
    freeze: Freeze,
) -> Result<LossAndGrads> {
    let m = hi.nrows();
    let s = &batch.similarity;
    let r = &batch.correlation;
    check_square("similarity slice", &s.view(), m)?;
    check_square("correlation slice", &r.view(), m)?;
    let c = cosines(hi, ht)?;

    let sr = reconstruction(&c, s);
    let sa = alignment(&c);
    let cp = correlation(&c, &r.view(), w.beta);
    let loss = LossBreakdown {
        total: sr + w.mu1 * cp + w.mu2 * sa,
        reconstruction: sr,
        correlation: cp,
        alignment: sa,
    };

    // ∂L/∂C for each cosine matrix
    let (mu1, mu2, beta) = (w.mu1, w.mu2, w.beta);
    let g_it = Zip::from(&c.it)
        .and(s)
        .and(r)
        .and(&c.ii)
        .and(&c.tt)
        .map_collect(|&it, &s, &r, &ii, &tt| {
            2.0 * (it - s) + 2.0 * mu2 * ((it - ii) + (it - tt)) + 2.0 * mu1 * r * (it * r - beta * r)
        });
    let g_ii = Zip::from(&c.ii)
        .and(s)
        .and(&c.it)
        .and(&c.tt)
        .map_collect(|&ii, &s, &it, &tt| 2.0 * (ii - s) + 2.0 * mu2 * ((ii - tt) - (it - ii)));
    let g_tt = Zip::from(&c.tt)
        .and(s)
        .and(&c.it)
        .and(&c.ii)
        .map_collect(|&tt, &s, &it, &ii| 2.0 * (tt - s) + 2.0 * mu2 * (-(ii - tt) - (it - tt)));

    let grad_image = if freeze == Freeze::FreezeImage {
        Array2::zeros(hi.dim())
    } else {
        let sym = &g_ii + &g_ii.t();
        let g = g_it.dot(&c.txt.unit) + sym.dot(&c.img.unit);
        through_normalization(g, &c.img)
    };
    let grad_text = if freeze == Freeze::FreezeText {
        Array2::zeros(ht.dim())
    } else {
        let sym = &g_tt + &g_tt.t();
        let g = g_it.t().dot(&c.img.unit) + sym.dot(&c.txt.unit);
        through_normalization(g, &c.txt)
    };
    Ok(LossAndGrads {
        loss,
        grad_image,
        grad_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cos_scalar(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for k in 0..a.len() {
            dot += a[k] * b[k];
            na += a[k] * a[k];
            nb += b[k] * b[k];
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    /// Scalar triple-loop evaluation of all three losses.
    fn scalar_losses(hi: &Array2<f64>, ht: &Array2<f64>, s: &Array2<f64>, r: &Array2<f64>, beta: f64) -> (f64, f64, f64) {
        let m = hi.nrows();
        let (mut sr, mut sa, mut cp) = (0.0, 0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                let it = cos_scalar(hi.row(i), ht.row(j));
                let ii = cos_scalar(hi.row(i), hi.row(j));
                let tt = cos_scalar(ht.row(i), ht.row(j));
                sr += (s[[i, j]] - it).powi(2) + (s[[i, j]] - ii).powi(2) + (s[[i, j]] - tt).powi(2);
                sa += (ii - tt).powi(2) + (it - ii).powi(2) + (it - tt).powi(2);
                cp += (it * r[[i, j]] - beta * r[[i, j]]).powi(2);
            }
        }
        (sr, sa, cp)
    }

    fn random_case(rng: &mut ChaCha8Rng, m: usize, k: usize) -> (Array2<f64>, Array2<f64>, BatchSlice) {
        let hi = Array2::from_shape_simple_fn((m, k), || rng.random_range(-1.0..1.0));
        let ht = Array2::from_shape_simple_fn((m, k), || rng.random_range(-1.0..1.0));
        let mut s = Array2::from_shape_simple_fn((m, m), || rng.random_range(-1.0..1.0));
        s = (&s + &s.t()) * 0.5;
        let mut r = Array2::from_shape_simple_fn((m, m), || f64::from(u8::from(rng.random_bool(0.4))));
        r = r.mapv(|v| v) + r.t();
        r.mapv_inplace(|v| v.min(1.0));
        r.diag_mut().fill(1.0);
        (hi, ht, BatchSlice::new((0..m).collect(), s, r).unwrap())
    }

    #[test]
    fn pairwise_cosine_examples() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        assert!(BatchSlice::new(vec![1, 1], Array2::<f64>::zeros((2, 2)), Array2::<f64>::zeros((2, 2))).is_err());
        assert_eq!(pairwise_cosine(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view()).unwrap(), array![[0.0]]);
        let err = pairwise_cosine(array![[0.0, 0.0]].view(), a.view()).unwrap_err();
        assert!(err.to_string().contains("zero-norm row 0"));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0..1.0));
        let c = pairwise_cosine(x.view(), y.view()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((c[[i, j]] - cos_scalar(x.row(i), y.row(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_losses() {
        let hi = array![[1.0, 0.0]];
        let ht = array![[0.0, 1.0]];
        let one = array![[1.0]];
        assert_eq!(loss_sr(hi.view(), ht.view(), one.view()).unwrap(), 1.0);
        assert_eq!(loss_sa(hi.view(), ht.view()).unwrap(), 2.0);
        assert_eq!(loss_cp(hi.view(), ht.view(), one.view(), 1.5).unwrap(), 2.25);
        assert_eq!(loss_cp(hi.view(), hi.view(), one.view(), 1.0).unwrap(), 0.0);
        assert_eq!(loss_cp(hi.view(), ht.view(), array![[0.0]].view(), 1.5).unwrap(), 0.0);
        assert_eq!(loss_sa(hi.view(), hi.view()).unwrap(), 0.0);

        let batch = BatchSlice::new(vec![0], one.clone(), one.clone()).unwrap();
        let out = total_loss_and_grads(hi.view(), ht.view(), &batch, &LossWeights::default(), Freeze::None).unwrap();
        assert!((out.loss.total - 7.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let h = array![[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.0, 1.0]];
        let s = pairwise_cosine(h.view(), h.view()).unwrap();
        assert!(loss_sr(h.view(), h.view(), s.view()).unwrap() < 1e-24);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let (hi, ht, b) = random_case(&mut rng, 6, 5);
            let (sr, sa, cp) = scalar_losses(&hi, &ht, &b.similarity, &b.correlation, 1.5);
            assert!((loss_sr(hi.view(), ht.view(), b.similarity.view()).unwrap() - sr).abs() < 1e-5);
            assert!((loss_sa(hi.view(), ht.view()).unwrap() - sa).abs() < 1e-5);
            assert!((loss_cp(hi.view(), ht.view(), b.correlation.view(), 1.5).unwrap() - cp).abs() < 1e-5);
        }
    }

    fn fd_grad(
        hi: &Array2<f64>,
        ht: &Array2<f64>,
        b: &BatchSlice,
        w: &LossWeights,
        image_side: bool,
        step: f64,
    ) -> Array2<f64> {
        let f = |a: &Array2<f64>, c: &Array2<f64>| {
            total_loss_and_grads(a.view(), c.view(), b, w, Freeze::None).unwrap().loss.total
        };
        let target = if image_side { hi } else { ht };
        let mut out = Array2::zeros(target.dim());
        for idx in 0..target.len() {
            let (i, k) = (idx / target.ncols(), idx % target.ncols());
            let mut up = target.clone();
            let mut down = target.clone();
            up[[i, k]] += step;
            down[[i, k]] -= step;
            let (lu, ld) = if image_side { (f(&up, ht), f(&down, ht)) } else { (f(hi, &up), f(hi, &down)) };
            out[[i, k]] = (lu - ld) / (2.0 * step);
        }
        out
    }

    fn rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
        a.iter()
            .zip(n.iter())
            .map(|(&x, &y)| {
                let s = x.abs().max(y.abs());
                if s < 1e-8 { (x - y).abs() } else { (x - y).abs() / s }
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = LossWeights::default();
        for _ in 0..4 {
            let (hi, ht, b) = random_case(&mut rng, 3, 4);
            let out = total_loss_and_grads(hi.view(), ht.view(), &b, &w, Freeze::None).unwrap();
            let ni = fd_grad(&hi, &ht, &b, &w, true, 1e-4);
            let nt = fd_grad(&hi, &ht, &b, &w, false, 1e-4);
            assert!(rel_err(&out.grad_image, &ni) <= 1e-4, "image {}", rel_err(&out.grad_image, &ni));
            assert!(rel_err(&out.grad_text, &nt) <= 1e-4, "text {}", rel_err(&out.grad_text, &nt));
        }
    }

    #[test]
    fn frozen_side_has_zero_gradient_and_same_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (hi, ht, b) = random_case(&mut rng, 4, 6);
        let bt = ht.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let w = LossWeights::default();
        let free = total_loss_and_grads(hi.view(), bt.view(), &b, &w, Freeze::None).unwrap();
        let frozen = total_loss_and_grads(hi.view(), bt.view(), &b, &w, Freeze::FreezeText).unwrap();
        assert!(frozen.grad_text.iter().all(|&v| v == 0.0));
        assert_eq!(frozen.loss, free.loss);
        assert_eq!(frozen.grad_image, free.grad_image);
        let other = total_loss_and_grads(bt.view(), hi.view(), &b, &w, Freeze::FreezeImage).unwrap();
        assert!(other.grad_image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let a = Array2::<f64>::ones((2, 3));
        let b = Array2::<f64>::ones((3, 3));
        assert!(matches!(loss_sa(a.view(), b.view()), Err(Error::Dimension(_))));
        assert!(matches!(loss_sr(a.view(), a.view(), b.view()), Err(Error::Dimension(_))));
        assert!(BatchSlice::new(vec![1, 1], Array2::zeros((2, 2)), Array2::zeros((2, 2))).is_err());
    }

    proptest::proptest! {
        #[test]
        fn nonnegative_and_scale_invariant(seed in 0u64..300, scale in 0.01f64..50.0, row in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (hi, ht, b) = random_case(&mut rng, 5, 4);
            let w = LossWeights::default();
            let base = total_loss_and_grads(hi.view(), ht.view(), &b, &w, Freeze::None).unwrap().loss;
            let mut hs = hi.clone();
            hs.row_mut(row).mapv_inplace(|v| v * scale);
            let scaled = total_loss_and_grads(hs.view(), ht.view(), &b, &w, Freeze::None).unwrap().loss;
            proptest::prop_assert!(base.reconstruction >= 0.0 && base.alignment >= 0.0 && base.correlation >= 0.0);
            proptest::prop_assert!((base.total - scaled.total).abs() <= 1e-9 * base.total.max(1.0));
        }

        #[test]
        fn row_permutation_invariant(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (hi, ht, b) = random_case(&mut rng, 5, 4);
            let perm = [2usize, 4, 0, 3, 1];
            let p = |x: &Array2<f64>| x.select(Axis(0), &perm);
            let pp = |x: &Array2<f64>| x.select(Axis(0), &perm).select(Axis(1), &perm);
            let pb = BatchSlice::new((0..5).collect(), pp(&b.similarity), pp(&b.correlation)).unwrap();
            let w = LossWeights::default();
            let l1 = total_loss_and_grads(hi.view(), ht.view(), &b, &w, Freeze::None).unwrap().loss;
            let l2 = total_loss_and_grads(p(&hi).view(), p(&ht).view(), &pb, &w, Freeze::None).unwrap().loss;
            proptest::prop_assert!((l1.reconstruction - l2.reconstruction).abs() <= 1e-9);
            proptest::prop_assert!((l1.alignment - l2.alignment).abs() <= 1e-9);
            proptest::prop_assert!((l1.correlation - l2.correlation).abs() <= 1e-9);
        }
    }
}
