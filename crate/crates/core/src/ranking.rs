//! Ordinal primitives: spectral seriation of a subspace similarity matrix and
//! the blackbox-differentiable rank operator.
//!
//! Seriation recovers a linear order of a batch from pairwise affinities. We
//! form the graph Laplacian `L = D − A` and take the eigenvector of its
//! second-smallest eigenvalue (the Fiedler vector). Sorting its entries gives
//! the order. The eigenvector is found by power iteration on `cI − L`, where
//! `c` bounds the spectrum of `L` and the constant vector (eigenvalue 0 of `L`)
//! is projected out at every step.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, DsclError, Result};
use crate::eval::spearman;
use crate::tensor::Tensor;

/// Convergence tolerance on the change of the normalized iterate.
pub const SERIATION_TOL: f64 = 1e-10;
pub const SERIATION_MAX_ITER: usize = 10_000;
/// Algebraic connectivity at or below this means the affinity graph is
/// disconnected and the order is undefined.
pub const CONNECTIVITY_EPS: f64 = 1e-12;
/// Relative margin added to the Gershgorin shift.
pub const SHIFT_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityKind {
    Distance,
    Affinity,
}

/// A symmetric `B×B` matrix of pairwise distances or affinities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, kind: SimilarityKind) -> Result<Self> {
        let (r, c) = values.dims2();
        if values.shape().len() != 2 || r != c {
            return dim_err(format!("similarity matrix must be square, got {:?}", values.shape()));
        }
        Ok(Self { values, kind })
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    /// Checks symmetry (1e-10), nonnegativity and the diagonal convention.
    pub fn validate(&self) -> Result<()> {
        let b = self.size();
        let diag = match self.kind {
            SimilarityKind::Distance => 0.0,
            SimilarityKind::Affinity => 1.0,
        };
        for i in 0..b {
            if (self.values.get(i, i) - diag).abs() > 1e-10 {
                return Err(DsclError::Contract(format!("diagonal entry {i} is not {diag}")));
            }
            for j in 0..b {
                let v = self.values.get(i, j);
                if !(v >= 0.0) || (v - self.values.get(j, i)).abs() > 1e-10 {
                    return Err(DsclError::Contract(format!(
                        "entry ({i},{j}) breaks symmetry or nonnegativity"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordinal ranking of a batch: a permutation of `0..B`, 0 = smallest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &r)| i != r) {
            return Err(DsclError::Contract(format!("{ranks:?} is not a permutation")));
        }
        Ok(Self(ranks))
    }

    /// Ranks of `values`, ties broken by index.
    pub fn of(values: &[f64]) -> Self {
        Self(ordinal_ranks(values))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let n = self.0.len();
        Self(self.0.iter().map(|&r| n - 1 - r).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&r| r as f64).collect()
    }
}

/// `ranks[i]` = number of `j` with `v[j] < v[i]`, plus the number of earlier
/// indices holding an equal value.
pub fn ordinal_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// Outcome of an affinity conversion; `degenerate` is set when every
/// distance was zero and a uniform affinity was returned instead.
#[derive(Clone, Debug)]
pub struct AffinityResult {
    pub affinity: SimilarityMatrix,
    pub sigma: f64,
    pub degenerate: bool,
}

/// Gaussian kernel `exp(−d²/(2σ²))` with σ the median off-diagonal distance.
///
/// If the median is zero but some distances are positive, σ falls back to the
/// median of the positive distances.
pub fn distance_to_affinity(d: &SimilarityMatrix) -> Result<AffinityResult> {
    if d.kind != SimilarityKind::Distance {
        return Err(DsclError::Contract("expected a distance matrix".into()));
    }
    let b = d.size();
    let mut off: Vec<f64> = Vec::with_capacity(b * (b.saturating_sub(1)) / 2);
    for i in 0..b {
        for j in (i + 1)..b {
            off.push(d.values.get(i, j));
        }
    }
    let mut sigma = median(&mut off);
    if sigma <= 0.0 {
        let mut positive: Vec<f64> = off.iter().copied().filter(|&x| x > 0.0).collect();
        sigma = median(&mut positive);
    }
    if !(sigma > 0.0) {
        return Ok(AffinityResult {
            affinity: SimilarityMatrix::new(Tensor::full(&[b, b], 1.0), SimilarityKind::Affinity)?,
            sigma: 0.0,
            degenerate: true,
        });
    }
    let denom = 2.0 * sigma * sigma;
    let mut values = d.values.map(|x| (-x * x / denom).exp());
    for i in 0..b {
        values.set(i, i, 1.0);
    }
    Ok(AffinityResult {
        affinity: SimilarityMatrix::new(values, SimilarityKind::Affinity)?,
        sigma,
        degenerate: false,
    })
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Graph Laplacian `D − A`; the diagonal of `A` is ignored.
pub fn laplacian(a: &Tensor) -> Tensor {
    let b = a.rows();
    let mut l = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let mut deg = 0.0;
        for j in 0..b {
            if i != j {
                let w = a.get(i, j);
                l.set(i, j, -w);
                deg += w;
            }
        }
        l.set(i, i, deg);
    }
    l
}

/// The Fiedler vector of a Laplacian with its eigenvalue and the number of
/// iterations used.
#[derive(Clone, Debug)]
pub struct Fiedler {
    pub vector: Vec<f64>,
    pub eigenvalue: f64,
    pub iterations: usize,
}

pub fn fiedler_vector(lap: &Tensor) -> Result<Fiedler> {
    let b = lap.rows();
    if b < 2 {
        return Err(DsclError::Contract("seriation needs at least two items".into()));
    }
    // Gershgorin: every eigenvalue of L is at most max_i Σ_j |L_ij|. The
    // bound is attained when λ₂ = λ_max (B = 2, complete uniform graphs), so a
    // small margin keeps the Fiedler direction from being annihilated.
    let bound = (0..b)
        .map(|i| lap.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let shift = bound * (1.0 + SHIFT_MARGIN);
    if bound <= 0.0 {
        return Err(DsclError::SeriationUndefined(
            "affinity graph has no edges".into(),
        ));
    }

    let mut v: Vec<f64> = (0..b)
        .map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5 + 0.01 * i as f64)
        .collect();
    deflate_and_normalize(&mut v);

    let mut w = vec![0.0; b];
    for it in 1..=SERIATION_MAX_ITER {
        for i in 0..b {
            let row = lap.row(i);
            let lv: f64 = row.iter().zip(&v).map(|(x, y)| x * y).sum();
            w[i] = shift * v[i] - lv;
        }
        deflate_and_normalize(&mut w);
        let plus: f64 = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
        let minus: f64 = w.iter().zip(&v).map(|(a, b)| (a + b) * (a + b)).sum();
        std::mem::swap(&mut v, &mut w);
        if plus.min(minus).sqrt() < SERIATION_TOL {
            let eigenvalue = rayleigh(lap, &v);
            if eigenvalue <= CONNECTIVITY_EPS {
                return Err(DsclError::SeriationUndefined(format!(
                    "algebraic connectivity {eigenvalue:e} is zero; the affinity graph is disconnected"
                )));
            }
            return Ok(Fiedler {
                vector: v,
                eigenvalue,
                iterations: it,
            });
        }
    }
    Err(DsclError::Numeric(format!(
        "Fiedler power iteration did not converge in {SERIATION_MAX_ITER} iterations"
    )))
}

fn deflate_and_normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn rayleigh(lap: &Tensor, v: &[f64]) -> f64 {
    (0..v.len())
        .map(|i| v[i] * lap.row(i).iter().zip(v).map(|(x, y)| x * y).sum::<f64>())
        .sum()
}

/// Orders a batch from its affinity matrix via the Fiedler vector.
///
/// The sign of the eigenvector is fixed so that, of the two items at the
/// extremes of the order, the one with the smaller index receives rank 0.
pub fn spectral_seriation(a: &SimilarityMatrix) -> Result<RankVector> {
    if a.kind != SimilarityKind::Affinity {
        return Err(DsclError::Contract("seriation expects an affinity matrix".into()));
    }
    if a.size() < 2 {
        return Err(DsclError::Contract("seriation needs B ≥ 2".into()));
    }
    let f = fiedler_vector(&laplacian(&a.values))?;
    let mut v = f.vector;
    let ranks = ordinal_ranks(&v);
    let lo = ranks.iter().position(|&r| r == 0).unwrap();
    let hi = ranks.iter().position(|&r| r == ranks.len() - 1).unwrap();
    if hi < lo {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(RankVector::of(&v))
}

/// Quadratic seriation objective `Σ_ij A[i,j]·(r[i] − r[j])²`.
pub fn seriation_objective(a: &Tensor, ranks: &[usize]) -> f64 {
    let b = ranks.len();
    let mut s = 0.0;
    for i in 0..b {
        for j in 0..b {
            let d = ranks[i] as f64 - ranks[j] as f64;
            s += a.get(i, j) * d * d;
        }
    }
    s
}

/// Differentiable ranking of a vector (or of every row of a matrix).
pub fn soft_rank(g: &mut Graph, v: Var, lambda: f64) -> Result<Var> {
    g.rank_rows(v, lambda)
}

/// Normalized squared rank difference `(1/B)·Σ (r − t)² / B²`, averaged over
/// the rows of `pred`. `target` holds one rank row per row of `pred`.
pub fn rank_similarity_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let pv = g.value(pred);
    if pv.dims2() != target.dims2() {
        return dim_err(format!(
            "rank vectors differ in shape: {:?} vs {:?}",
            pv.shape(),
            target.shape()
        ));
    }
    let (rows, b) = pv.dims2();
    let t = g.constant(target.clone().reshape(pv.shape().to_vec())?);
    let diff = g.sub(pred, t)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    let bf = b as f64;
    Ok(g.scale(s, 1.0 / (rows as f64 * bf * bf * bf)))
}

/// Result of the exhaustive rank-ambiguity search over all scalar rankings.
#[derive(Clone, Debug, Serialize)]
pub struct AmbiguityReport {
    pub batch_size: usize,
    /// `max_r min(ρ(r, y₁), ρ(r, y₂))` over every ranking `r`.
    pub best_scalar_min: f64,
    pub best_scalar_ranking: Vec<usize>,
    /// Spearman of each per-target ranking with its own target.
    pub per_subspace: Vec<f64>,
    pub rankings_searched: usize,
}

/// Searches every ranking of a batch for the one that best agrees with both
/// label components at once, and compares it with one ranking per component.
pub fn rank_ambiguity(y1: &[f64], y2: &[f64]) -> Result<AmbiguityReport> {
    let b = y1.len();
    if b != y2.len() || b < 2 {
        return dim_err("label components must have equal length ≥ 2");
    }
    if b > 9 {
        return Err(DsclError::Contract(format!(
            "exhaustive search over {b}! rankings is not supported"
        )));
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_r = Vec::new();
    let mut count = 0;
    for perm in (0..b).permutations(b) {
        count += 1;
        let r: Vec<f64> = perm.iter().map(|&x| x as f64).collect();
        let (Some(a), Some(c)) = (spearman(&r, y1), spearman(&r, y2)) else {
            continue;
        };
        let m = a.min(c);
        if m > best {
            best = m;
            best_r = perm;
        }
    }
    let per_subspace = [y1, y2]
        .iter()
        .map(|y| {
            let r = RankVector::of(y).to_f64();
            spearman(&r, y).unwrap_or(f64::NAN)
        })
        .collect();
    Ok(AmbiguityReport {
        batch_size: b,
        best_scalar_min: best,
        best_scalar_ranking: best_r,
        per_subspace,
        rankings_searched: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_affinity(pos: &[f64]) -> SimilarityMatrix {
        let b = pos.len();
        let mut d = Tensor::zeros(&[b, b]);
        for i in 0..b {
            for j in 0..b {
                d.set(i, j, (pos[i] - pos[j]).abs());
            }
        }
        let d = SimilarityMatrix::new(d, SimilarityKind::Distance).unwrap();
        distance_to_affinity(&d).unwrap().affinity
    }

    #[test]
    fn ordinal_ranks_examples() {
        assert_eq!(ordinal_ranks(&[0.1, 0.5, 0.3]), vec![0, 2, 1]);
        assert_eq!(ordinal_ranks(&[7.0, 7.0, 7.0]), vec![0, 1, 2]);
    }

    #[test]
    fn rank_vector_must_be_permutation() {
        assert!(RankVector::new(vec![0, 2, 1]).is_ok());
        assert!(RankVector::new(vec![0, 2, 2]).is_err());
    }

    #[test]
    fn coincident_points_have_unit_affinity() {
        let a = line_affinity(&[0.0, 0.0, 1.0]);
        assert_eq!(a.values.get(0, 1), 1.0);
        a.validate().unwrap();
    }

    #[test]
    fn affinity_is_monotone_in_distance() {
        let a = line_affinity(&[0.0, 1.0, 2.0]);
        let (a01, a12, a02) = (a.values.get(0, 1), a.values.get(1, 2), a.values.get(0, 2));
        assert!((a01 - a12).abs() < 1e-15);
        assert!(a01 > a02);
    }

    #[test]
    fn affinity_is_scale_free() {
        let a = line_affinity(&[0.0, 0.4, 1.7, 3.0]);
        let b = line_affinity(&[0.0, 4.0, 17.0, 30.0]);
        assert!(a.values.max_abs_diff(&b.values) < 1e-12);
    }

    #[test]
    fn all_zero_distances_give_uniform_affinity() {
        let d = SimilarityMatrix::new(Tensor::zeros(&[3, 3]), SimilarityKind::Distance).unwrap();
        let r = distance_to_affinity(&d).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.affinity.values.data(), &[1.0; 9]);
    }

    #[test]
    fn two_items_rank_in_index_order() {
        let a = line_affinity(&[5.0, 1.0]);
        assert_eq!(spectral_seriation(&a).unwrap().as_slice(), &[0, 1]);
    }

    #[test]
    fn seriation_recovers_line_order() {
        let a = line_affinity(&[0.0, 3.0, 1.0, 2.0]);
        let r = spectral_seriation(&a).unwrap();
        assert!(r.as_slice() == [0, 3, 1, 2] || r.reversed().as_slice() == [0, 3, 1, 2], "{r:?}");
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let mut a = Tensor::identity(4);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        a.set(2, 3, 1.0);
        a.set(3, 2, 1.0);
        let a = SimilarityMatrix::new(a, SimilarityKind::Affinity).unwrap();
        assert!(matches!(
            spectral_seriation(&a),
            Err(DsclError::SeriationUndefined(_))
        ));
    }

    #[test]
    fn rank_loss_by_hand() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = rank_similarity_loss(&mut g, p, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-15);
        let l0 = rank_similarity_loss(&mut g, p, &Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        assert!(rank_similarity_loss(&mut g, p, &Tensor::vector(vec![0.0])).is_err());
    }
}
