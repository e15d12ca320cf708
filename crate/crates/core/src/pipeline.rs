//! Two-phase training: a supervised init phase that settles the subspace
//! mask, then semi-supervised finetuning on the full objective.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::SavedModel;
use crate::data::{gather_rows, DataSplit, LabeledSet, Standardizer};
use crate::disentangle::{
    apply_mask, build_mask, disjointness_score, jacobian_loss, JacobianEma, JacobianStats, SubspaceMask,
};
use crate::error::{DsclError, Result};
use crate::eval::{metric_suite, MetricReport};
use crate::losses::{
    regression_loss, subspace_similarities, supervised_contrastive_loss, total_loss,
    unsupervised_contrastive_loss, unsupervised_ranking_loss, LabelKernelConfig, LossComponents, LossWeights,
};
use crate::model::{Adam, Model};
use crate::ranking::{distance_to_affinity, spectral_seriation, RankVector, SimilarityKind, SimilarityMatrix};
use crate::tensor::Tensor;

/// Default perturbation scale of the blackbox rank backward.
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub init_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            init_epochs: 30,
            finetune_epochs: 100,
            batch_size: 32,
            lr: 1e-4,
        }
    }
}

/// How the subspace mask is obtained for finetuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Built during the init phase and frozen afterwards.
    #[default]
    Frozen,
    /// No init phase: the mask is rebuilt from a running Jacobian estimate at
    /// every finetuning step. Only meant for the "without init" ablation.
    Online,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub kernel: LabelKernelConfig,
    pub lambda: f64,
    pub mask_policy: MaskPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            weights: LossWeights::default(),
            kernel: LabelKernelConfig::default(),
            lambda: DEFAULT_LAMBDA,
            mask_policy: MaskPolicy::Frozen,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.batch_size < 2 {
            return Err(DsclError::Config("batch_size must be at least 2".into()));
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return Err(DsclError::Config("lr must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(DsclError::Config("lambda must be positive".into()));
        }
        if !(self.kernel.bandwidth > 0.0 && self.kernel.bandwidth.is_finite()) {
            return Err(DsclError::Config("kernel bandwidth must be positive".into()));
        }
        match self.mask_policy {
            MaskPolicy::Frozen if s.init_epochs == 0 => Err(DsclError::Contract(
                "finetuning needs a frozen mask: init_epochs must be at least 1".into(),
            )),
            MaskPolicy::Online if s.init_epochs != 0 => Err(DsclError::Config(
                "the online mask policy replaces the init phase; set init_epochs to 0".into(),
            )),
            _ => self.weights.validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Finetune,
}

/// Loss breakdown of one optimizer step. Terms that were not computed are
/// `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub epoch: usize,
    pub l_reg: f64,
    pub l_j: Option<f64>,
    pub l_sc: Option<f64>,
    pub l_uc: Option<f64>,
    pub l_ur: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_l_reg: f64,
    /// Disjointness of the running Jacobian estimate under the current mask.
    pub disjointness: Option<f64>,
    pub seriation_failures: usize,
    pub zero_rows: usize,
}

/// One line of the JSONL run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Unlabeled batches whose seriation failed; their unsupervised terms
    /// were skipped.
    pub seriation_failures: usize,
    /// Affinity matrices built from all-zero distances.
    pub degenerate_affinities: usize,
    /// (row, subspace) pairs with all-zero gated features.
    pub zero_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub mask: SubspaceMask,
    /// Running Jacobian magnitude estimate the mask was built from.
    pub jacobian: Tensor,
}

/// Where a run writes its side outputs.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    /// Rewritten at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    pub input_norm: Option<Standardizer>,
    pub label_norm: Option<Standardizer>,
}

/// Fixed-size batches drawn from a reshuffled index pool; the remainder of a
/// pass that cannot fill a batch is dropped.
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self, batch: usize) -> &[usize] {
        let batch = batch.min(self.order.len());
        if self.pos + batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += batch;
        &self.order[self.pos - batch..self.pos]
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// RNG used for parameter initialization of a run seeded with `seed`.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

struct Trainer<'a, 'o> {
    model: Model,
    adam: Adam,
    cfg: &'a TrainConfig,
    out: TrainOutputs<'o>,
    log: RunLog,
    ema: JacobianEma,
    mask: Option<SubspaceMask>,
    step: u64,
    last_checkpoint: Option<PathBuf>,
    epoch_failures: usize,
    epoch_zero_rows: usize,
}

struct Labeled<'b> {
    x: Tensor,
    y: &'b Tensor,
}

impl<'a, 'o> Trainer<'a, 'o> {
    fn run_step(&mut self, phase: Phase, epoch: usize, lab: Labeled<'_>, unl: Option<Tensor>) -> Result<()> {
        let w = self.cfg.weights;
        let mut g = Graph::new();
        let p = self.model.bind(&mut g);
        let x = g.constant(lab.x);
        let z = self.model.encode(&mut g, &p, x)?;
        let out = self.model.regress(&mut g, &p, z)?;
        let reg = regression_loss(&mut g, out.prediction, lab.y)?;
        let rows = self.model.jacobian_rows(&mut g, &p, &out)?;
        let l_j = if rows.len() >= 2 {
            Some(jacobian_loss(&mut g, &rows)?)
        } else {
            None
        };
        if phase == Phase::Init || self.cfg.mask_policy == MaskPolicy::Online {
            let values: Vec<Tensor> = rows.iter().map(|&r| g.value(r).clone()).collect();
            self.ema.update(&JacobianStats::from_rows(&values)?.aggregated);
            if self.cfg.mask_policy == MaskPolicy::Online {
                self.mask = Some(build_mask(self.ema.value().expect("updated"))?);
            }
        }

        let mut c = LossComponents {
            reg,
            j: l_j.filter(|_| w.gamma > 0.0),
            sc: None,
            uc: None,
            ur: None,
        };
        if phase == Phase::Finetune {
            let mask = self
                .mask
                .clone()
                .ok_or_else(|| DsclError::Contract("finetuning started without a mask".into()))?;
            if w.w_sc > 0.0 {
                let zd = apply_mask(&mut g, z, &mask)?;
                let sims = subspace_similarities(&mut g, &zd)?;
                self.epoch_zero_rows += sims.zero_rows;
                c.sc = Some(supervised_contrastive_loss(&mut g, &sims, lab.y, &self.cfg.kernel)?);
            }
            if let Some(xu) = unl.filter(|t| t.rows() >= 2 && w.uses_unlabeled()) {
                self.unsupervised_terms(&mut g, &p, xu, &mask, &mut c)?;
            }
        }
        let total = total_loss(&mut g, &c, &w)?;
        let value = |o: Option<Var>| o.map(|v| g.value(v).item());
        let rec = StepRecord {
            step: self.step,
            phase,
            epoch,
            l_reg: g.value(reg).item(),
            l_j: value(l_j),
            l_sc: value(c.sc),
            l_uc: value(c.uc),
            l_ur: value(c.ur),
            total: g.value(total).item(),
        };
        if !rec.total.is_finite() {
            return Err(DsclError::Diverged {
                step: self.step,
                checkpoint: self.last_checkpoint.clone(),
            });
        }
        g.backward(total)?;
        let grads = self.model.gradients(&g, &p);
        self.adam.step(&mut self.model.params, &grads)?;
        self.emit(LogRecord::Step(rec.clone()))?;
        self.log.steps.push(rec);
        self.step += 1;
        Ok(())
    }

    fn unsupervised_terms(
        &mut self,
        g: &mut Graph,
        p: &crate::model::BoundParams,
        xu: Tensor,
        mask: &SubspaceMask,
        c: &mut LossComponents,
    ) -> Result<()> {
        let w = self.cfg.weights;
        let x = g.constant(xu);
        let z = self.model.encode(g, p, x)?;
        let out = self.model.regress(g, p, z)?;
        let zd = apply_mask(g, z, mask)?;
        let sims = subspace_similarities(g, &zd)?;
        self.epoch_zero_rows += sims.zero_rows;
        let mut pseudo = Vec::with_capacity(sims.len());
        for &d in &sims.distances {
            match self.seriate(g.value(d)) {
                Ok(r) => pseudo.push(r),
                Err(DsclError::SeriationUndefined(_) | DsclError::Numeric(_)) => {
                    log::debug!("step {}: seriation failed, unsupervised terms skipped", self.step);
                    self.log.seriation_failures += 1;
                    self.epoch_failures += 1;
                    return Ok(());
                }
                Err(e) => return Err(e),
            }
        }
        if w.w_uc > 0.0 {
            c.uc = Some(unsupervised_contrastive_loss(g, &sims, &pseudo, self.cfg.lambda)?);
        }
        if w.w_ur > 0.0 {
            c.ur = Some(unsupervised_ranking_loss(g, out.prediction, &pseudo, self.cfg.lambda)?);
        }
        Ok(())
    }

    fn seriate(&mut self, distances: &Tensor) -> Result<RankVector> {
        let d = SimilarityMatrix::new(distances.clone(), SimilarityKind::Distance)?;
        let a = distance_to_affinity(&d)?;
        if a.degenerate {
            self.log.degenerate_affinities += 1;
        }
        spectral_seriation(&a.affinity)
    }

    fn emit(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(w) = self.out.log.as_mut() {
            serde_json::to_writer(&mut **w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn end_epoch(&mut self, phase: Phase, epoch: usize, first_step: usize) -> Result<()> {
        if phase == Phase::Init {
            let ema = self
                .ema
                .value()
                .ok_or_else(|| DsclError::Contract("init epoch ran no steps".into()))?;
            self.mask = Some(build_mask(ema)?);
        }
        let steps = &self.log.steps[first_step..];
        let n = steps.len().max(1) as f64;
        let disjointness = match (self.ema.value(), &self.mask) {
            (Some(e), Some(m)) => Some(disjointness_score(e, m)?),
            _ => None,
        };
        let rec = EpochRecord {
            phase,
            epoch,
            steps: steps.len(),
            mean_total: steps.iter().map(|s| s.total).sum::<f64>() / n,
            mean_l_reg: steps.iter().map(|s| s.l_reg).sum::<f64>() / n,
            disjointness,
            seriation_failures: std::mem::take(&mut self.epoch_failures),
            zero_rows: std::mem::take(&mut self.epoch_zero_rows),
        };
        self.log.zero_rows += rec.zero_rows;
        self.emit(LogRecord::Epoch(rec.clone()))?;
        self.log.epochs.push(rec);
        if let Some(path) = self.out.checkpoint.clone() {
            let saved = SavedModel {
                model: self.model.clone(),
                inputs: self.out.input_norm.clone(),
                labels: self.out.label_norm.clone(),
            };
            let tmp = path.with_extension("tmp");
            saved.to_checkpoint().save(&tmp)?;
            std::fs::rename(&tmp, &path)?;
            self.last_checkpoint = Some(path);
        }
        Ok(())
    }
}

/// Runs the init phase on labeled batches (`L_reg + γ·L_J`), freezes the
/// mask, then finetunes on `L_Total` with one labeled and one unlabeled
/// batch per step. A finetuning epoch is one pass over the unlabeled set, or
/// over the labeled set when nothing is unlabeled.
pub fn train(model: Model, data: &DataSplit, cfg: &TrainConfig, out: TrainOutputs<'_>) -> Result<(TrainedModel, RunLog)> {
    cfg.validate()?;
    let b = cfg.schedule.batch_size;
    let (lab, unl) = (&data.labeled, &data.unlabeled);
    if lab.len() < 2 {
        return Err(DsclError::Config("need at least two labeled rows".into()));
    }
    if lab.labels.cols() != model.num_targets() {
        return Err(DsclError::Config(format!(
            "model predicts {} targets but labels have {}",
            model.num_targets(),
            lab.labels.cols()
        )));
    }
    let adam = Adam::new(&model.params, cfg.schedule.lr);
    let mut t = Trainer {
        model,
        adam,
        cfg,
        out,
        log: RunLog::default(),
        ema: JacobianEma::default(),
        mask: None,
        step: 0,
        last_checkpoint: None,
        epoch_failures: 0,
        epoch_zero_rows: 0,
    };
    let mut lab_rng = stream(cfg.seed, 1);
    for epoch in 0..cfg.schedule.init_epochs {
        let first = t.log.steps.len();
        let mut order: Vec<usize> = (0..lab.len()).collect();
        order.shuffle(&mut lab_rng);
        for chunk in order.chunks(b).filter(|c| c.len() >= 2) {
            let y = gather_rows(&lab.labels, chunk);
            let x = gather_rows(&lab.features, chunk);
            t.run_step(Phase::Init, epoch, Labeled { x, y: &y }, None)?;
        }
        t.end_epoch(Phase::Init, epoch, first)?;
    }

    let mut lab_cycle = BatchCycler::new(lab.len(), lab_rng);
    let mut unl_cycle = BatchCycler::new(unl.len(), stream(cfg.seed, 2));
    let pool = if unl.len() >= 2 { unl.len() } else { lab.len() };
    let steps_per_epoch = (pool / b).max(1);
    let draw_unlabeled = unl.len() >= 2 && cfg.weights.uses_unlabeled();
    for epoch in 0..cfg.schedule.finetune_epochs {
        let first = t.log.steps.len();
        for _ in 0..steps_per_epoch {
            let li = lab_cycle.next(b);
            let (x, y) = (gather_rows(&lab.features, li), gather_rows(&lab.labels, li));
            let u = draw_unlabeled.then(|| gather_rows(&unl.features, unl_cycle.next(b)));
            t.run_step(Phase::Finetune, epoch, Labeled { x, y: &y }, u)?;
        }
        t.end_epoch(Phase::Finetune, epoch, first)?;
    }

    let mask = match t.mask.take() {
        Some(m) => m,
        None => build_mask(t.ema.value().ok_or_else(|| DsclError::Contract("no training steps ran".into()))?)?,
    };
    let jacobian = t.ema.value().cloned().expect("mask implies estimate");
    Ok((
        TrainedModel {
            model: t.model,
            mask,
            jacobian,
        },
        t.log,
    ))
}

/// Metrics of `model` on `set`, in original label units when `label_norm`
/// is given.
pub fn evaluate(model: &Model, set: &LabeledSet, label_norm: Option<&Standardizer>) -> Result<MetricReport> {
    let pred = model.predict(&set.features)?;
    let (pred, truth) = match label_norm {
        Some(s) => (s.inverse(&pred), s.inverse(&set.labels)),
        None => (pred, set.labels.clone()),
    };
    metric_suite(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, Generator, SplitSpec, SyntheticTaskConfig};
    use crate::model::{EncoderConfig, RegressorConfig, RegressorDepth};

    fn setup(seed: u64) -> (Model, DataSplit) {
        let data = generate_synthetic(&SyntheticTaskConfig {
            num_samples: 400,
            input_dim: 4,
            num_targets: 2,
            generator: Generator::NonlinearSine,
            noise_std: 0.05,
            seed: 3,
        })
        .unwrap()
        .standardize();
        let sets = split(&data, &SplitSpec::new(0.2, seed).unwrap(), 8).unwrap();
        let model = Model::new(
            EncoderConfig::new(4, vec![16], 8),
            RegressorConfig {
                feature_dim: 8,
                num_targets: 2,
                depth: RegressorDepth::TwoLayer,
                hidden_dim: 8,
            },
            &mut init_rng(seed),
        )
        .unwrap();
        (model, sets)
    }

    fn small(weights: LossWeights) -> TrainConfig {
        TrainConfig {
            schedule: TrainSchedule {
                init_epochs: 2,
                finetune_epochs: 1,
                batch_size: 8,
                lr: 1e-3,
            },
            weights,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_weights_match_plain_l1_training() {
        let (model, sets) = setup(1);
        let cfg = small(LossWeights::ZERO);
        let (a, log) = train(model.clone(), &sets, &cfg, TrainOutputs::default()).unwrap();
        assert!(log.steps.iter().all(|s| s.l_sc.is_none() && s.l_uc.is_none() && s.total == s.l_reg));

        // Reference loop: the same batches, L1 loss only.
        let mut params = model.params.clone();
        let mut adam = Adam::new(&params, cfg.schedule.lr);
        let mut lab_rng = stream(cfg.seed, 1);
        let lab = &sets.labeled;
        let mut step = |idx: &[usize], params: &mut crate::model::ModelParams| {
            let m = Model::from_params(model.encoder.clone(), model.regressor.clone(), params.clone()).unwrap();
            let mut g = Graph::new();
            let p = m.bind(&mut g);
            let x = g.constant(gather_rows(&lab.features, idx));
            let z = m.encode(&mut g, &p, x).unwrap();
            let y = m.regress(&mut g, &p, z).unwrap();
            let l = regression_loss(&mut g, y.prediction, &gather_rows(&lab.labels, idx)).unwrap();
            g.backward(l).unwrap();
            adam.step(params, &m.gradients(&g, &p)).unwrap();
        };
        for _ in 0..cfg.schedule.init_epochs {
            let mut order: Vec<usize> = (0..lab.len()).collect();
            order.shuffle(&mut lab_rng);
            for chunk in order.chunks(8).filter(|c| c.len() >= 2) {
                step(chunk, &mut params);
            }
        }
        let mut cyc = BatchCycler::new(lab.len(), lab_rng);
        for _ in 0..(sets.unlabeled.len() / 8) {
            let idx = cyc.next(8).to_vec();
            step(&idx, &mut params);
        }
        assert_eq!(a.model.params, params);
    }

    #[test]
    fn full_objective_runs_and_is_reproducible() {
        let (model, sets) = setup(2);
        let cfg = small(LossWeights::default());
        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        let (a, log) = train(
            model.clone(),
            &sets,
            &cfg,
            TrainOutputs {
                log: Some(&mut buf1),
                ..Default::default()
            },
        )
        .unwrap();
        train(
            model,
            &sets,
            &cfg,
            TrainOutputs {
                log: Some(&mut buf2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(buf1, buf2);
        assert!(a.mask.is_partition());
        let ft: Vec<_> = log.steps.iter().filter(|s| s.phase == Phase::Finetune).collect();
        assert!(!ft.is_empty());
        assert!(ft.iter().all(|s| s.l_sc.is_some() && s.l_uc.is_some() && s.l_ur.is_some()));
        let first = String::from_utf8(buf1).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["step", "l_reg", "l_j", "l_sc", "l_uc", "l_ur", "total"] {
            assert!(line.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn frozen_policy_requires_init_phase() {
        let mut cfg = TrainConfig::default();
        cfg.schedule.init_epochs = 0;
        assert!(matches!(cfg.validate(), Err(DsclError::Contract(_))));
        cfg.mask_policy = MaskPolicy::Online;
        cfg.validate().unwrap();
    }

    #[test]
    fn cycler_batches_are_full_and_cover_each_pass() {
        let mut c = BatchCycler::new(10, stream(0, 9));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| c.next(3).to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }
}
