//! The five training objectives and their weighted sum.
//!
//! | term   | data       | compares                                                     |
//! |--------|------------|--------------------------------------------------------------|
//! | `reg`  | labeled    | predictions with labels (L1)                                 |
//! | `j`    | labeled    | rows of the regressor Jacobian (pairwise overlap)            |
//! | `sc`   | labeled    | per-subspace feature Gram with a label RBF Gram              |
//! | `uc`   | unlabeled  | per-anchor feature-distance order with pseudo-rank gaps      |
//! | `ur`   | unlabeled  | per-anchor prediction-distance order with pseudo-rank gaps   |

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Ties, Var, ZERO_ROW_NORM};
use crate::disentangle::DisentangledBatch;
use crate::error::{dim_err, DsclError, Result};
use crate::eval::average_ranks;
use crate::ranking::{rank_similarity_loss, RankVector};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub w_sc: f64,
    pub w_uc: f64,
    pub w_ur: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            w_sc: 1.0,
            w_uc: 0.05,
            w_ur: 0.01,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        gamma: 0.0,
        w_sc: 0.0,
        w_uc: 0.0,
        w_ur: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("w_sc", self.w_sc),
            ("w_uc", self.w_uc),
            ("w_ur", self.w_ur),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DsclError::Config(format!("loss weight {name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.w_uc > 0.0 || self.w_ur > 0.0
    }
}

/// Bandwidth of the label kernel `K(y, y') = exp(−γ·(y − y')²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelKernelConfig {
    pub bandwidth: f64,
}

impl Default for LabelKernelConfig {
    fn default() -> Self {
        Self { bandwidth: 1.0 }
    }
}

impl LabelKernelConfig {
    pub fn kernel(&self, a: f64, b: f64) -> f64 {
        (-self.bandwidth * (a - b) * (a - b)).exp()
    }
}

/// Mean absolute error between predictions and labels.
pub fn regression_loss(g: &mut Graph, pred: Var, labels: &Tensor) -> Result<Var> {
    if g.value(pred).shape() != labels.shape() {
        return dim_err(format!(
            "predictions {:?} and labels {:?} differ",
            g.value(pred).shape(),
            labels.shape()
        ));
    }
    let y = g.constant(labels.clone());
    let d = g.sub(pred, y)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Pairwise distances of unit-normalized features within each subspace.
#[derive(Clone, Debug)]
pub struct SubspaceSimilaritySet {
    /// One `B×B` distance matrix per target.
    pub distances: Vec<Var>,
    /// Number of (row, subspace) pairs whose gated features were all zero.
    pub zero_rows: usize,
}

impl SubspaceSimilaritySet {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Normalizes each gated subspace row and takes pairwise L2 distances.
///
/// Gated features are zero outside their support, so normalizing the full
/// row equals normalizing its restriction to the support set.
pub fn subspace_similarities(g: &mut Graph, zd: &DisentangledBatch) -> Result<SubspaceSimilaritySet> {
    let mut distances = Vec::with_capacity(zd.subspaces.len());
    let mut zero_rows = 0;
    for &s in &zd.subspaces {
        let t = g.value(s);
        zero_rows += (0..t.rows())
            .filter(|&i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() <= ZERO_ROW_NORM)
            .count();
        let u = g.normalize_rows(s)?;
        distances.push(g.pairwise_dist(u)?);
    }
    Ok(SubspaceSimilaritySet { distances, zero_rows })
}

/// Label RBF Gram matrix of column `m`.
pub fn label_gram(labels: &Tensor, m: usize, kcfg: &LabelKernelConfig) -> Tensor {
    let b = labels.rows();
    let mut t = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            t.set(i, j, kcfg.kernel(labels.get(i, m), labels.get(j, m)));
        }
    }
    t
}

/// `Σ_m (1/B²)·‖F_m − T_m‖²_F` with `F_m = 1 − ½·d²` (cosine similarity of
/// the normalized subspace features) and `T_m` the label RBF Gram.
pub fn supervised_contrastive_loss(
    g: &mut Graph,
    sims: &SubspaceSimilaritySet,
    labels: &Tensor,
    kcfg: &LabelKernelConfig,
) -> Result<Var> {
    if labels.cols() != sims.len() {
        return dim_err(format!(
            "{} label columns for {} subspaces",
            labels.cols(),
            sims.len()
        ));
    }
    let mut total: Option<Var> = None;
    for (m, &d) in sims.distances.iter().enumerate() {
        let b = g.value(d).rows();
        if labels.rows() != b {
            return dim_err(format!("{} labels for a batch of {b}", labels.rows()));
        }
        let f = feature_gram(g, d);
        let t = g.constant(label_gram(labels, m, kcfg));
        let diff = g.sub(f, t)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        let term = g.scale(s, 1.0 / (b * b) as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| DsclError::Contract("no subspaces".into()))
}

fn feature_gram(g: &mut Graph, d: Var) -> Var {
    let d2 = g.square(d);
    let h = g.scale(d2, -0.5);
    g.add_scalar(h, 1.0)
}

/// Row `i` holds the ranks of `−|R − R[i]|`: items close to the anchor in
/// pseudo-rank rank high. Equal gaps (one step left and one step right) share
/// their average rank so the target does not depend on batch order.
pub fn pseudo_rank_targets(pseudo: &RankVector) -> Tensor {
    let r = pseudo.to_f64();
    let b = r.len();
    let mut out = Vec::with_capacity(b * b);
    for i in 0..b {
        let row: Vec<f64> = r.iter().map(|&x| -(x - r[i]).abs()).collect();
        out.extend(average_ranks(&row).into_iter().map(|x| x - 1.0));
    }
    Tensor::matrix(b, b, out).expect("sized")
}

pub fn unsupervised_contrastive_loss(
    g: &mut Graph,
    sims: &SubspaceSimilaritySet,
    pseudo: &[RankVector],
    lambda: f64,
) -> Result<Var> {
    if pseudo.len() != sims.len() {
        return dim_err(format!(
            "{} pseudo rankings for {} subspaces",
            pseudo.len(),
            sims.len()
        ));
    }
    let mut terms = Vec::with_capacity(pseudo.len());
    for (&d, r) in sims.distances.iter().zip(pseudo) {
        if g.value(d).rows() != r.len() {
            return dim_err(format!("pseudo ranking of length {} for batch {}", r.len(), g.value(d).rows()));
        }
        let neg = g.scale(d, -1.0);
        terms.push(anchor_rank_loss(g, neg, r, lambda)?);
    }
    mean_of(g, &terms)
}

/// Mean over targets and anchors of `ℓ(rk(−|Ŷ'[:,m] − Ŷ'[i,m]|), rk(−|R'_m − R'_m[i]|))`.
pub fn unsupervised_ranking_loss(
    g: &mut Graph,
    pred: Var,
    pseudo: &[RankVector],
    lambda: f64,
) -> Result<Var> {
    let (b, m) = g.value(pred).dims2();
    if pseudo.len() != m || pseudo.iter().any(|r| r.len() != b) {
        return dim_err(format!(
            "pseudo rankings do not match predictions of shape {:?}",
            g.value(pred).shape()
        ));
    }
    let mut terms = Vec::with_capacity(m);
    for (k, r) in pseudo.iter().enumerate() {
        let col = g.select_col(pred, k)?;
        let diff = g.pairwise_diff(col)?;
        let abs = g.abs(diff);
        let neg = g.scale(abs, -1.0);
        terms.push(anchor_rank_loss(g, neg, r, lambda)?);
    }
    mean_of(g, &terms)
}

/// Both sides rank ties by their average so the loss depends on neither the
/// batch order nor the orientation of the pseudo ranking.
fn anchor_rank_loss(g: &mut Graph, scores: Var, pseudo: &RankVector, lambda: f64) -> Result<Var> {
    let ranks = g.rank_rows_with(scores, lambda, Ties::Average)?;
    rank_similarity_loss(g, ranks, &pseudo_rank_targets(pseudo))
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let first = *terms.first().ok_or_else(|| DsclError::Contract("no targets".into()))?;
    let mut acc = first;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Loss terms of one step; absent terms contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub reg: Var,
    pub j: Option<Var>,
    pub sc: Option<Var>,
    pub uc: Option<Var>,
    pub ur: Option<Var>,
}

/// `L_reg + γ·L_J + w_sc·L_SC + w_uc·L_UC + w_ur·L_UR`.
pub fn total_loss(g: &mut Graph, c: &LossComponents, w: &LossWeights) -> Result<Var> {
    let mut total = c.reg;
    for (term, weight) in [(c.j, w.gamma), (c.sc, w.w_sc), (c.uc, w.w_uc), (c.ur, w.w_ur)] {
        if let Some(t) = term {
            let s = g.scale(t, weight);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}
