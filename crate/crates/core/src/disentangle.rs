//! Regressor Jacobians, the orthogonality regularizer, and the binary mask
//! that splits feature dimensions into one subspace per target.

use std::io::Write;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, DsclError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Decay of the running mean of batch Jacobian magnitudes.
pub const EMA_DECAY: f64 = 0.99;

/// Sensitivities of each regressor output to each feature.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianStats {
    /// `B×M×N`: `∂R^m/∂Z^n` at each sample.
    pub per_sample: Tensor,
    /// `M×N`: batch mean of `|per_sample|`.
    pub aggregated: Tensor,
}

impl JacobianStats {
    /// Assembles stats from `M` per-target `B×N` Jacobian rows.
    pub fn from_rows(rows: &[Tensor]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return dim_err("no Jacobian rows");
        }
        let (b, n) = rows[0].dims2();
        if rows.iter().any(|r| r.dims2() != (b, n)) {
            return dim_err("Jacobian rows differ in shape");
        }
        let mut per = vec![0.0; b * m * n];
        let mut agg = vec![0.0; m * n];
        for (k, r) in rows.iter().enumerate() {
            for i in 0..b {
                for j in 0..n {
                    let v = r.get(i, j);
                    per[(i * m + k) * n + j] = v;
                    agg[k * n + j] += v.abs() / b as f64;
                }
            }
        }
        Ok(Self {
            per_sample: Tensor::new(vec![b, m, n], per)?,
            aggregated: Tensor::matrix(m, n, agg)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.per_sample.shape()[0]
    }

    pub fn targets(&self) -> usize {
        self.per_sample.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.per_sample.shape()[2]
    }

    /// `M×N` Jacobian of sample `i`.
    pub fn sample(&self, i: usize) -> Tensor {
        let (m, n) = (self.targets(), self.features());
        let start = i * m * n;
        Tensor::matrix(m, n, self.per_sample.data()[start..start + m * n].to_vec()).expect("sized")
    }
}

/// Per-sample regressor Jacobian at the rows of `z`, one backward pass per
/// output component.
pub fn compute_jacobian(model: &Model, z: &Tensor) -> Result<JacobianStats> {
    if !z.is_finite() {
        return Err(DsclError::Numeric("features contain non-finite values".into()));
    }
    let m = model.num_targets();
    let mut rows = Vec::with_capacity(m);
    for k in 0..m {
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let zv = g.param(z.clone());
        let y = model.regress(&mut g, &p, zv)?;
        let col = g.select_col(y.prediction, k)?;
        let s = g.sum(col);
        g.backward(s)?;
        rows.push(g.grad(zv).cloned().expect("z requires grad"));
    }
    JacobianStats::from_rows(&rows)
}

/// `L_J = (1/B)·Σ_i Σ_{m≠k} Σ_n |J_i[m,n]·J_i[k,n]|` over per-sample
/// Jacobian rows (each `B×N`). Both orderings of a pair are counted.
pub fn jacobian_loss(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    let m = rows.len();
    if m < 2 {
        return Err(DsclError::Contract(format!(
            "Jacobian regularizer needs at least two targets, got {m}"
        )));
    }
    let b = g.value(rows[0]).rows() as f64;
    let mut total: Option<Var> = None;
    for a in 0..m {
        for c in (a + 1)..m {
            let prod = g.mul(rows[a], rows[c])?;
            let abs = g.abs(prod);
            let s = g.sum(abs);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
    }
    Ok(g.scale(total.expect("m ≥ 2"), 2.0 / b))
}

/// Plain-value version of [`jacobian_loss`] computed from the stats.
pub fn jacobian_loss_value(stats: &JacobianStats) -> Result<f64> {
    let (b, m, n) = (stats.batch(), stats.targets(), stats.features());
    if m < 2 {
        return Err(DsclError::Contract("Jacobian regularizer needs M ≥ 2".into()));
    }
    let mut total = 0.0;
    for i in 0..b {
        let j = stats.sample(i);
        for a in 0..m {
            for c in 0..m {
                if a != c {
                    total += (0..n).map(|k| (j.get(a, k) * j.get(c, k)).abs()).sum::<f64>();
                }
            }
        }
    }
    Ok(total / b as f64)
}

/// `M×N` binary matrix with exactly one 1 per column.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceMask {
    pub mask: Tensor,
    /// `support_sets[m]` lists the feature indices assigned to target `m`.
    pub support_sets: Vec<Vec<usize>>,
    /// Columns whose Jacobian magnitudes were all zero (assigned to row 0).
    pub degenerate_columns: Vec<usize>,
}

impl SubspaceMask {
    pub fn targets(&self) -> usize {
        self.mask.rows()
    }

    pub fn features(&self) -> usize {
        self.mask.cols()
    }

    /// A mask from an explicit assignment of each feature to a target.
    pub fn from_assignment(targets: usize, assignment: &[usize]) -> Result<Self> {
        let n = assignment.len();
        let mut mask = Tensor::zeros(&[targets, n]);
        let mut support_sets = vec![Vec::new(); targets];
        for (j, &m) in assignment.iter().enumerate() {
            if m >= targets {
                return dim_err(format!("feature {j} assigned to target {m} of {targets}"));
            }
            mask.set(m, j, 1.0);
            support_sets[m].push(j);
        }
        Ok(Self {
            mask,
            support_sets,
            degenerate_columns: Vec::new(),
        })
    }

    /// Target index owning each feature.
    pub fn assignment(&self) -> Vec<usize> {
        (0..self.features())
            .map(|j| (0..self.targets()).find(|&m| self.mask.get(m, j) == 1.0).unwrap_or(0))
            .collect()
    }

    /// True when every column holds exactly one 1 and the supports
    /// partition the feature indices.
    pub fn is_partition(&self) -> bool {
        let (m, n) = self.mask.dims2();
        let one_hot = (0..n).all(|j| {
            let col: Vec<f64> = (0..m).map(|k| self.mask.get(k, j)).collect();
            col.iter().all(|&v| v == 0.0 || v == 1.0) && col.iter().sum::<f64>() == 1.0
        });
        let mut seen = vec![false; n];
        for s in &self.support_sets {
            for &j in s {
                if j >= n || seen[j] {
                    return false;
                }
                seen[j] = true;
            }
        }
        one_hot && seen.iter().all(|&s| s)
    }

    /// Writes the mask as `M` CSV rows of `N` zeros and ones.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_matrix_csv(&self.mask, w)
    }
}

/// Assigns each feature to the target with the largest aggregated Jacobian
/// magnitude; ties go to the smaller target index.
pub fn build_mask(aggregated: &Tensor) -> Result<SubspaceMask> {
    if !aggregated.is_finite() {
        return Err(DsclError::Numeric("aggregated Jacobian is not finite".into()));
    }
    if aggregated.shape().len() != 2 {
        return dim_err(format!("aggregated Jacobian must be M×N, got {:?}", aggregated.shape()));
    }
    let (m, n) = aggregated.dims2();
    let mut assignment = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for j in 0..n {
        let mut best = 0;
        for k in 1..m {
            if aggregated.get(k, j).abs() > aggregated.get(best, j).abs() {
                best = k;
            }
        }
        if (0..m).all(|k| aggregated.get(k, j) == 0.0) {
            degenerate.push(j);
        }
        assignment.push(best);
    }
    let mut mask = SubspaceMask::from_assignment(m, &assignment)?;
    mask.degenerate_columns = degenerate;
    Ok(mask)
}

/// Features gated per subspace: `subspaces[m] = Z ⊙ mask[m,:]`, each `B×N`.
#[derive(Clone, Debug)]
pub struct DisentangledBatch {
    pub subspaces: Vec<Var>,
}

impl DisentangledBatch {
    /// Dense `B×N×M` copy of the gated features.
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        let m = self.subspaces.len();
        let (b, n) = g.value(self.subspaces[0]).dims2();
        let mut out = vec![0.0; b * n * m];
        for (k, &v) in self.subspaces.iter().enumerate() {
            let t = g.value(v);
            for i in 0..b {
                for j in 0..n {
                    out[(i * n + j) * m + k] = t.get(i, j);
                }
            }
        }
        Tensor::new(vec![b, n, m], out).expect("sized")
    }
}

/// Gates `z` by each mask row. The mask is a constant, so gradients reach
/// only the selected feature indices.
pub fn apply_mask(g: &mut Graph, z: Var, mask: &SubspaceMask) -> Result<DisentangledBatch> {
    let width = g.value(z).cols();
    if width != mask.features() {
        return dim_err(format!(
            "features have width {width}, mask has {} columns",
            mask.features()
        ));
    }
    let subspaces = (0..mask.targets())
        .map(|m| {
            let row = g.constant(Tensor::vector(mask.mask.row(m).to_vec()));
            g.mul_row(z, row)
        })
        .collect::<Result<_>>()?;
    Ok(DisentangledBatch { subspaces })
}

/// Fraction of aggregated Jacobian mass inside the mask. 1 means every
/// column is fully owned by its assigned target. An all-zero Jacobian
/// scores 0.
pub fn disjointness_score(aggregated: &Tensor, mask: &SubspaceMask) -> Result<f64> {
    if aggregated.dims2() != mask.mask.dims2() {
        return dim_err("Jacobian and mask shapes differ");
    }
    let total: f64 = aggregated.data().iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        log::warn!("disjointness score of an all-zero Jacobian is reported as 0");
        return Ok(0.0);
    }
    let inside: f64 = aggregated
        .data()
        .iter()
        .zip(mask.mask.data())
        .map(|(a, m)| a.abs() * m)
        .sum();
    Ok(inside / total)
}

/// Running mean of batch Jacobian magnitudes across the init phase.
#[derive(Clone, Debug)]
pub struct JacobianEma {
    pub decay: f64,
    state: Option<Tensor>,
    updates: usize,
}

impl Default for JacobianEma {
    fn default() -> Self {
        Self::new(EMA_DECAY)
    }
}

impl JacobianEma {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            state: None,
            updates: 0,
        }
    }

    pub fn update(&mut self, aggregated: &Tensor) {
        self.updates += 1;
        match &mut self.state {
            None => self.state = Some(aggregated.clone()),
            Some(s) => {
                for (x, &a) in s.data_mut().iter_mut().zip(aggregated.data()) {
                    *x = self.decay * *x + (1.0 - self.decay) * a;
                }
            }
        }
    }

    pub fn value(&self) -> Option<&Tensor> {
        self.state.as_ref()
    }

    pub fn updates(&self) -> usize {
        self.updates
    }
}

/// Writes a matrix as plain CSV rows without a header.
pub fn write_matrix_csv(t: &Tensor, w: impl Write) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for i in 0..t.rows() {
        wr.write_record(t.row(i).iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}
