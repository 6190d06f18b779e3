//! Unsupervised adaptation by alternating minimization.
//!
//! Each mini-batch pair is processed in two steps. With the network fixed, the
//! transport plan between source and target samples is solved over the
//! pairwise cost
//!
//! ```text
//! C_ij = α‖z_i^s − z_j^t‖² + β‖y_i^s − ŷ_j^t‖²
//! ```
//!
//! where `z` are length-normalized latents, `y^s` the one-hot source labels
//! and `ŷ^t` the current target posteriors. With the plan fixed, one Adam
//! step is taken on `CE(source) + λ·Σ_ij γ_ij C_ij`. Gradients reach both
//! domains' latents and the target posteriors; none flow through the plan.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset, SamplerPolicy};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, DEFAULT_P_TARGET};
use crate::model::{
    adam_step, cross_entropy, pretrain_source, AdamConfig, AdamState, BackendModel, ForwardTrace,
    Gradients, PretrainReport,
};
use crate::ot::{ot_objective, pairwise_sq_euclidean, CostKind, CostMatrix, OtSolver, TransportPlan};

/// Latent width used when none is configured, capped by the input width.
pub const DEFAULT_LATENT_DIM: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Weight of the latent-feature distance in the pairwise cost.
    pub alpha: f64,
    /// Weight of the label/posterior distance in the pairwise cost.
    pub beta: f64,
    /// Weight of the transport loss against the source cross-entropy.
    pub lambda: f64,
    pub batch_size: usize,
    /// Adaptation epochs.
    pub epochs: usize,
    /// Source-only epochs run before adaptation.
    pub pretrain_epochs: usize,
    pub solver: OtSolver,
    pub lr: f64,
    pub seed: u64,
    /// `None` means `min(200, input dim)`.
    pub latent_dim: Option<usize>,
    /// Initialize the projection from a closed-form LDA fit on the source.
    pub lda_init: bool,
    pub sampler_policy: SamplerPolicy,
    pub p_target: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.0003,
            lambda: 1.0,
            batch_size: 128,
            epochs: 30,
            pretrain_epochs: 20,
            solver: OtSolver::Exact,
            lr: 0.001,
            seed: 42,
            latent_dim: None,
            lda_init: false,
            sampler_policy: SamplerPolicy::DropLast,
            p_target: DEFAULT_P_TARGET,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if let OtSolver::Sinkhorn(cfg) = &self.solver {
            cfg.validate()?;
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config("p_target must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn resolved_latent_dim(&self, input_dim: usize) -> usize {
        self.latent_dim
            .unwrap_or_else(|| DEFAULT_LATENT_DIM.min(input_dim))
    }

    /// Seed of the sampler used during pretraining; adaptation uses the next one.
    pub fn pretrain_sampler_seed(&self) -> u64 {
        self.seed
    }

    pub fn adapt_sampler_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LossWeights {
    fn transport_active(&self) -> bool {
        self.lambda != 0.0 && (self.alpha != 0.0 || self.beta != 0.0)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

/// Pairwise adaptation cost between a source and a target batch.
pub fn adaptation_cost_matrix(
    latent_s: ArrayView2<'_, f64>,
    latent_t: ArrayView2<'_, f64>,
    onehot_s: ArrayView2<'_, f64>,
    posterior_t: ArrayView2<'_, f64>,
    alpha: f64,
    beta: f64,
) -> Result<CostMatrix> {
    if latent_s.nrows() != latent_t.nrows() {
        return Err(Error::Shape(format!(
            "source batch {} vs target batch {}",
            latent_s.nrows(),
            latent_t.nrows()
        )));
    }
    if onehot_s.nrows() != latent_s.nrows() || posterior_t.nrows() != latent_t.nrows() {
        return Err(Error::Shape("label rows do not match latent rows".into()));
    }
    let features = pairwise_sq_euclidean(latent_s, latent_t)?;
    let labels = pairwise_sq_euclidean(onehot_s, posterior_t)?;
    let values = features * alpha + labels * beta;
    CostMatrix::new(values, CostKind::Combined)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub ce: f64,
    pub ot: f64,
    pub total: f64,
}

/// Loss and parameter gradients of one batch pair under a fixed plan `gamma`.
pub fn loss_and_gradients(
    model: &BackendModel,
    source: &ForwardTrace,
    target: &ForwardTrace,
    labels_s: &[usize],
    gamma: ArrayView2<'_, f64>,
    weights: LossWeights,
) -> Result<(BatchLoss, Gradients)> {
    let b = source.batch_size();
    if target.batch_size() != b || gamma.dim() != (b, b) {
        return Err(Error::Shape(format!(
            "plan {:?} for batches {b} and {}",
            gamma.dim(),
            target.batch_size()
        )));
    }
    let ce = cross_entropy(source.posteriors.view(), labels_s)?;
    let onehot = one_hot(labels_s, model.class_count());
    let cost = adaptation_cost_matrix(
        source.latent.view(),
        target.latent.view(),
        onehot.view(),
        target.posteriors.view(),
        weights.alpha,
        weights.beta,
    )?;
    let ot: f64 = cost
        .values()
        .iter()
        .zip(gamma.iter())
        .map(|(c, g)| c * g)
        .sum();
    let total = ce + weights.lambda * ot;

    if !weights.transport_active() {
        let grads = model.backward(source, None, None, Some(labels_s))?;
        return Ok((BatchLoss { ce, ot, total }, grads));
    }

    // d/dz_s_i   = 2αλ (r_i z_s_i − Σ_j γ_ij z_t_j)
    // d/dz_t_j   = 2αλ (c_j z_t_j − Σ_i γ_ij z_s_i)
    // d/dŷ_t_j   = 2βλ (c_j ŷ_t_j − Σ_i γ_ij y_s_i)
    let rows: Array1<f64> = gamma.sum_axis(Axis(1));
    let cols: Array1<f64> = gamma.sum_axis(Axis(0));
    let fa = 2.0 * weights.alpha * weights.lambda;
    let fb = 2.0 * weights.beta * weights.lambda;
    let grad_zs = (&source.latent * &rows.view().insert_axis(Axis(1)) - gamma.dot(&target.latent)) * fa;
    let grad_zt =
        (&target.latent * &cols.view().insert_axis(Axis(1)) - gamma.t().dot(&source.latent)) * fa;
    let grad_pt = (&target.posteriors * &cols.view().insert_axis(Axis(1)) - gamma.t().dot(&onehot)) * fb;

    let mut grads = model.backward(source, Some(grad_zs.view()), None, Some(labels_s))?;
    let target_grads = model.backward(target, Some(grad_zt.view()), Some(grad_pt.view()), None)?;
    grads.add_assign(&target_grads);
    Ok((BatchLoss { ce, ot, total }, grads))
}

/// Batch loss under a fixed plan, recomputed from scratch; used by gradient checks.
pub fn fixed_plan_loss(
    model: &BackendModel,
    xs: ArrayView2<'_, f64>,
    labels_s: &[usize],
    xt: ArrayView2<'_, f64>,
    gamma: ArrayView2<'_, f64>,
    weights: LossWeights,
) -> Result<BatchLoss> {
    let ts = model.forward(xs)?;
    let tt = model.forward(xt)?;
    Ok(loss_and_gradients(model, &ts, &tt, labels_s, gamma, weights)?.0)
}

/// Solves the plan for one batch pair with the network fixed.
pub fn solve_batch_plan(
    source: &ForwardTrace,
    target: &ForwardTrace,
    labels_s: &[usize],
    classes: usize,
    weights: LossWeights,
    solver: &OtSolver,
) -> Result<(CostMatrix, TransportPlan)> {
    let onehot = one_hot(labels_s, classes);
    let cost = adaptation_cost_matrix(
        source.latent.view(),
        target.latent.view(),
        onehot.view(),
        target.posteriors.view(),
        weights.alpha,
        weights.beta,
    )?;
    let plan = solver.solve(&cost)?;
    Ok((cost, plan))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub ce: f64,
    pub ot: f64,
    pub total: f64,
    pub marginal_violation: f64,
    pub solver_iterations: usize,
}

/// Everything one adaptation step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: BatchLoss,
    pub plan: TransportPlan,
    /// `ot_objective(cost, plan)` as reported by the solver side.
    pub plan_objective: f64,
}

/// One alternating step on a batch pair: plan with the network fixed, then
/// one Adam update with the plan fixed.
pub fn adapt_step(
    model: &mut BackendModel,
    adam: &mut AdamState,
    xs: ArrayView2<'_, f64>,
    labels_s: &[usize],
    xt: ArrayView2<'_, f64>,
    cfg: &AdaptConfig,
) -> Result<StepOutcome> {
    let weights = cfg.weights();
    let ts = model.forward(xs)?;
    let tt = model.forward(xt)?;
    let (cost, plan) = solve_batch_plan(&ts, &tt, labels_s, model.class_count(), weights, &cfg.solver)?;
    let plan_objective = ot_objective(&cost, &plan)?;
    let (loss, grads) = loss_and_gradients(model, &ts, &tt, labels_s, plan.gamma.view(), weights)?;
    adam_step(model, adam, &grads)?;
    Ok(StepOutcome {
        loss,
        plan,
        plan_objective,
    })
}

/// One epoch of paired mini-batches. Target labels are never read.
#[allow(clippy::too_many_arguments)]
pub fn adapt_epoch(
    model: &mut BackendModel,
    source: &Dataset,
    target: &Dataset,
    cfg: &AdaptConfig,
    adam: &mut AdamState,
    sampler: &mut BatchSampler,
    epoch: usize,
    mut on_plan: impl FnMut(&TransportPlan),
) -> Result<Vec<StepRecord>> {
    if !source.has_labels() {
        return Err(Error::Unlabeled("adaptation needs a labeled source".into()));
    }
    if source.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "source width {} vs target width {}",
            source.dim(),
            target.dim()
        )));
    }
    let batches = sampler.batches_per_epoch(source.len(), target.len());
    sampler.start_epoch();
    let mut records = Vec::with_capacity(batches);
    for batch in 0..batches {
        let wrap = |e| Error::Batch {
            batch,
            source: Box::new(e),
        };
        let (is, it) = sampler.next_batch_pair(source, target).map_err(wrap)?;
        let xs = source.gather(&is);
        let ys = source.labels_at(&is)?;
        let xt = target.gather(&it);
        let outcome = adapt_step(model, adam, xs.view(), &ys, xt.view(), cfg).map_err(wrap)?;
        on_plan(&outcome.plan);
        records.push(StepRecord {
            epoch,
            batch,
            ce: outcome.loss.ce,
            ot: outcome.loss.ot,
            total: outcome.loss.total,
            marginal_violation: outcome.plan.marginal_violation,
            solver_iterations: outcome.plan.iterations,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: AdaptConfig,
    pub solver: String,
    pub pretrain_sampler_seed: u64,
    pub adapt_sampler_seed: u64,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Mean logged OT loss of each epoch.
    pub fn epoch_mean_ot(&self) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(|s| s.ot).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationRun {
    pub model: BackendModel,
    /// Model after pretraining, before any adaptation step.
    pub baseline: BackendModel,
    pub pretrain: Option<PretrainReport>,
    pub log: TrainLog,
    /// Target-domain evaluation before and after adaptation, when the target
    /// carries labels.
    pub before: Option<EvalReport>,
    pub after: Option<EvalReport>,
    pub source_after: Option<EvalReport>,
    /// Target label reads between the end of pretraining and the start of
    /// the final evaluation.
    pub target_label_reads: usize,
    /// Plan of the final batch, if any step ran.
    pub last_plan: Option<TransportPlan>,
}

pub fn initial_model(source: &Dataset, cfg: &AdaptConfig) -> Result<BackendModel> {
    let latent = cfg.resolved_latent_dim(source.dim());
    if cfg.lda_init {
        BackendModel::with_lda_init(source, latent, cfg.seed)
    } else {
        BackendModel::new(source.dim(), latent, source.class_count(), cfg.seed)
    }
}

/// Pretraining, target evaluation, adaptation epochs and a final evaluation.
pub fn run_adaptation(source: &Dataset, target: &Dataset, cfg: &AdaptConfig) -> Result<AdaptationRun> {
    cfg.validate()?;
    if source.class_count() != target.class_count() {
        return Err(Error::Shape(format!(
            "source has {} classes, target {}",
            source.class_count(),
            target.class_count()
        )));
    }
    let mut model = initial_model(source, cfg)?;

    let pretrain = if cfg.pretrain_epochs > 0 {
        let mut adam = AdamState::for_model(&model, cfg.adam());
        let mut sampler =
            BatchSampler::new(cfg.batch_size, cfg.pretrain_sampler_seed(), cfg.sampler_policy)?;
        Some(pretrain_source(&mut model, source, cfg.pretrain_epochs, &mut adam, &mut sampler)?)
    } else {
        None
    };
    let baseline = model.clone();

    let eval_target = |m: &BackendModel| -> Result<Option<EvalReport>> {
        if target.has_labels() {
            evaluate(m, target, cfg.p_target).map(Some)
        } else {
            Ok(None)
        }
    };
    let before = eval_target(&model)?;

    let reads_start = target.label_reads();
    let mut adam = AdamState::for_model(&model, cfg.adam());
    let mut sampler = BatchSampler::new(cfg.batch_size, cfg.adapt_sampler_seed(), cfg.sampler_policy)?;
    let mut steps = Vec::new();
    let mut last_plan = None;
    for epoch in 0..cfg.epochs {
        let records = adapt_epoch(
            &mut model,
            source,
            target,
            cfg,
            &mut adam,
            &mut sampler,
            epoch,
            |plan| last_plan = Some(plan.clone()),
        )?;
        steps.extend(records);
    }
    let target_label_reads = target.label_reads() - reads_start;

    let after = eval_target(&model)?;
    let source_after = if source.has_labels() {
        Some(evaluate(&model, source, cfg.p_target)?)
    } else {
        None
    };
    Ok(AdaptationRun {
        model,
        baseline,
        pretrain,
        log: TrainLog {
            config: cfg.clone(),
            solver: cfg.solver.name().into(),
            pretrain_sampler_seed: cfg.pretrain_sampler_seed(),
            adapt_sampler_seed: cfg.adapt_sampler_seed(),
            steps,
        },
        before,
        after,
        source_after,
        target_label_reads,
        last_plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub eer: Option<f64>,
    pub cavg: Option<f64>,
    pub status: String,
}

/// One full adaptation run per (alpha, beta) cell, in grid order, all with
/// the seed of `cfg`. A failing cell is marked `failed` and the sweep goes on.
pub fn hyper_sweep(
    source: &Dataset,
    target: &Dataset,
    grid: &[(f64, f64)],
    cfg: &AdaptConfig,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(grid
        .iter()
        .map(|&(alpha, beta)| {
            let cell = AdaptConfig {
                alpha,
                beta,
                ..cfg.clone()
            };
            match run_adaptation(source, target, &cell) {
                Ok(run) => match run.after {
                    Some(report) => SweepRow {
                        alpha,
                        beta,
                        eer: Some(report.eer),
                        cavg: Some(report.cavg),
                        status: "ok".into(),
                    },
                    None => SweepRow {
                        alpha,
                        beta,
                        eer: None,
                        cavg: None,
                        status: "failed: target has no labels".into(),
                    },
                },
                Err(e) => SweepRow {
                    alpha,
                    beta,
                    eer: None,
                    cavg: None,
                    status: format!("failed: {e}"),
                },
            }
        })
        .collect())
}

/// CSV with header `alpha,beta,eer,cavg,status`. Failed cells leave the
/// metric fields empty and report `failed` as the status.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,beta,eer,cavg,status\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let status = if r.status == "ok" { "ok" } else { "failed" };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.alpha,
            r.beta,
            fmt(r.eer),
            fmt(r.cavg),
            status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domain_pair, SynthSpec};
    use crate::model::pretrain_source;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_pair() -> (Dataset, Dataset) {
        let spec = SynthSpec {
            class_count: 3,
            dim: 8,
            per_class_count: 12,
            ..SynthSpec::default()
        };
        synth_domain_pair(&spec).unwrap()
    }

    fn small_cfg() -> AdaptConfig {
        AdaptConfig {
            batch_size: 8,
            epochs: 2,
            pretrain_epochs: 2,
            latent_dim: Some(5),
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn cost_matrix_examples() {
        let zs = array![[0.0, 0.0], [1.0, 0.0]];
        let zt = array![[0.0, 1.0], [1.0, 1.0]];
        let ys = array![[1.0, 0.0], [0.0, 1.0]];
        let pt = array![[0.5, 0.5], [0.2, 0.8]];
        let c = adaptation_cost_matrix(zs.view(), zt.view(), ys.view(), pt.view(), 0.0, 0.0).unwrap();
        assert_eq!(c.values(), Array2::<f64>::zeros((2, 2)));

        let c = adaptation_cost_matrix(zs.view(), zs.view(), ys.view(), pt.view(), 1.0, 0.0).unwrap();
        assert_eq!(c.values()[[0, 0]], 0.0);
        assert_eq!(c.values()[[1, 1]], 0.0);

        let c = adaptation_cost_matrix(zs.view(), zt.view(), ys.view(), pt.view(), 0.1, 0.0).unwrap();
        let expected = array![[1.0, 2.0], [2.0, 1.0]] * 0.1;
        for (a, b) in c.values().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        // β term: ‖(1,0) − (0.5,0.5)‖² = 0.5
        let c = adaptation_cost_matrix(zs.view(), zt.view(), ys.view(), pt.view(), 0.0, 2.0).unwrap();
        assert!((c.values()[[0, 0]] - 1.0).abs() < 1e-15);

        let short = array![[0.0, 0.0]];
        assert!(adaptation_cost_matrix(short.view(), zt.view(), ys.view(), pt.view(), 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_weights_log_zero_ot() {
        let (s, t) = small_pair();
        let cfg = AdaptConfig {
            alpha: 0.0,
            beta: 0.0,
            ..small_cfg()
        };
        let run = run_adaptation(&s, &t, &cfg).unwrap();
        assert!(!run.log.steps.is_empty());
        assert!(run.log.steps.iter().all(|r| r.ot == 0.0));
    }

    #[test]
    fn total_is_ce_plus_lambda_ot() {
        let (s, t) = small_pair();
        let cfg = AdaptConfig {
            lambda: 0.7,
            beta: 0.05,
            ..small_cfg()
        };
        let run = run_adaptation(&s, &t, &cfg).unwrap();
        for r in &run.log.steps {
            assert!((r.total - (r.ce + cfg.lambda * r.ot)).abs() < 1e-6);
        }
    }

    #[test]
    fn step_loss_matches_plan_objective() {
        let (s, t) = small_pair();
        let cfg = small_cfg();
        let mut model = initial_model(&s, &cfg).unwrap();
        let mut adam = AdamState::for_model(&model, cfg.adam());
        let mut sampler = BatchSampler::new(8, 1, SamplerPolicy::DropLast).unwrap();
        for solver in [OtSolver::Exact, OtSolver::Sinkhorn(Default::default())] {
            let cfg = AdaptConfig { solver, ..cfg.clone() };
            for _ in 0..3 {
                let (is, it) = sampler.next_batch_pair(&s, &t).unwrap();
                let ys = s.labels_at(&is).unwrap();
                let out = adapt_step(&mut model, &mut adam, s.gather(&is).view(), &ys, t.gather(&it).view(), &cfg)
                    .unwrap();
                assert!((out.loss.ot - out.plan_objective).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_lambda_matches_source_training() {
        let (s, t) = small_pair();
        let cfg = AdaptConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let start = initial_model(&s, &cfg).unwrap();

        let mut a = start.clone();
        let mut adam_a = AdamState::for_model(&a, cfg.adam());
        let mut sampler_a = BatchSampler::new(8, 5, SamplerPolicy::DropLast).unwrap();
        pretrain_source(&mut a, &s, 3, &mut adam_a, &mut sampler_a).unwrap();

        let mut b = start;
        let mut adam_b = AdamState::for_model(&b, cfg.adam());
        let mut sampler_b = BatchSampler::new(8, 5, SamplerPolicy::DropLast).unwrap();
        for epoch in 0..3 {
            adapt_epoch(&mut b, &s, &t, &cfg, &mut adam_b, &mut sampler_b, epoch, |_| {}).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(adam_a, adam_b);
    }

    #[test]
    fn adaptation_never_reads_target_labels() {
        let (s, t) = small_pair();
        let run = run_adaptation(&s, &t, &small_cfg()).unwrap();
        assert_eq!(run.target_label_reads, 0);
        assert!(run.before.is_some() && run.after.is_some());
    }

    #[test]
    fn zero_epochs_is_a_noop() {
        let (s, t) = small_pair();
        let cfg = AdaptConfig {
            epochs: 0,
            ..small_cfg()
        };
        let run = run_adaptation(&s, &t, &cfg).unwrap();
        assert_eq!(run.before, run.after);
        assert_eq!(run.model, run.baseline);
    }

    #[test]
    fn runs_are_deterministic() {
        let (s, t) = small_pair();
        let a = run_adaptation(&s, &t, &small_cfg()).unwrap();
        let b = run_adaptation(&s, &t, &small_cfg()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn unlabeled_target_still_adapts() {
        let (s, t) = small_pair();
        let run = run_adaptation(&s, &t.without_labels(), &small_cfg()).unwrap();
        assert!(run.before.is_none());
        assert!(!run.log.steps.is_empty());
        let err = run_adaptation(&t.without_labels(), &s, &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::Unlabeled(_)));
    }

    #[test]
    fn sweep_bookkeeping() {
        let (s, t) = small_pair();
        let cfg = small_cfg();
        assert!(hyper_sweep(&s, &t, &[], &cfg).is_err());

        let rows = hyper_sweep(&s, &t, &[(0.1, 0.0003)], &cfg).unwrap();
        let run = run_adaptation(&s, &t, &cfg).unwrap();
        assert_eq!(rows[0].eer, Some(run.after.as_ref().unwrap().eer));
        assert_eq!(rows[0].cavg, Some(run.after.unwrap().cavg));

        let rows = hyper_sweep(&s, &t, &[(0.1, 0.0), (-1.0, 0.0), (0.0, 0.1)], &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("failed"));
        assert_eq!(rows[2].status, "ok");
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "alpha,beta,eer,cavg,status");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "-1,0,,,failed");
    }

    #[test]
    fn full_batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut normal = |r, c| Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng));
        let model = BackendModel::new(6, 5, 3, 1).unwrap();
        let mut model = BackendModel::from_parts(
            model.w_h,
            normal(1, 5).row(0).to_owned() * 0.3,
            model.w_g * 3.0,
            normal(1, 3).row(0).to_owned(),
        )
        .unwrap();
        let xs = normal(8, 6);
        let xt = normal(8, 6) + 0.5;
        let ys = [0, 1, 2, 0, 1, 2, 0, 1];
        let weights = LossWeights {
            alpha: 0.7,
            beta: 0.4,
            lambda: 1.3,
        };
        let ts = model.forward(xs.view()).unwrap();
        let tt = model.forward(xt.view()).unwrap();
        let (_, plan) = solve_batch_plan(
            &ts,
            &tt,
            &ys,
            3,
            weights,
            &OtSolver::Sinkhorn(Default::default()),
        )
        .unwrap();
        let gamma = plan.gamma;
        let (_, grads) = loss_and_gradients(&model, &ts, &tt, &ys, gamma.view(), weights).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let h = 1e-5;
        for k in 0..4 {
            for i in 0..analytic[k].len() {
                let orig = model.tensors()[k][i];
                model.tensors_mut()[k][i] = orig + h;
                let plus = fixed_plan_loss(&model, xs.view(), &ys, xt.view(), gamma.view(), weights).unwrap().total;
                model.tensors_mut()[k][i] = orig - h;
                let minus = fixed_plan_loss(&model, xs.view(), &ys, xt.view(), gamma.view(), weights).unwrap().total;
                model.tensors_mut()[k][i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let an = analytic[k][i];
                let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-4, "tensor {k}[{i}]: {an} vs {numeric}");
            }
        }
    }
}
