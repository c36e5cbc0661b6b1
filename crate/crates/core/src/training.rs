//! Objectives, optimizers, the training loop and hyperparameter selection.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::data::{batches, LabeledDataset, Splits};
use crate::dependence::{dc_conditional_node, dc_fast_node, one_hot};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, FairnessReport};
use crate::network::{build, build_probe, Forward, ModelParams, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Penalize DC(Z, latent).
    Independence,
    /// Penalize DC(Z, latent | Y).
    Separation,
}

/// Relative weights of cross-entropy, the sensitive penalty and the
/// label-retention reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossWeights {
    /// `α·[CE − DC(Y,·)] + (1−α)·penalty`. With `retain_target = false`
    /// the DC(Y,·) term is dropped.
    Alpha { alpha: f64, retain_target: bool },
    /// `CE + λ·penalty − μ·DC(Y,·)`.
    LambdaMu { lambda: f64, mu: f64 },
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossWeights::Alpha { alpha, .. } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
                }
            }
            LossWeights::LambdaMu { lambda, mu } => {
                if !(lambda >= 0.0 && mu >= 0.0 && lambda.is_finite() && mu.is_finite()) {
                    return Err(Error::Config(format!(
                        "lambda and mu must be finite and non-negative, got {lambda}, {mu}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// (cross-entropy, penalty, retention) coefficients.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        match *self {
            LossWeights::Alpha { alpha, retain_target } => {
                (alpha, 1.0 - alpha, if retain_target { alpha } else { 0.0 })
            }
            LossWeights::LambdaMu { lambda, mu } => (1.0, lambda, mu),
        }
    }

    /// Plain cross-entropy.
    pub fn cross_entropy_only() -> Self {
        LossWeights::LambdaMu { lambda: 0.0, mu: 0.0 }
    }
}

/// Everything that defines the per-batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub criterion: Criterion,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub criterion: Criterion,
    pub weights: LossWeights,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub stratified_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            criterion: Criterion::Separation,
            weights: LossWeights::Alpha {
                alpha: 0.5,
                retain_target: true,
            },
            lr: 1e-3,
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            stratified_batches: false,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            criterion: self.criterion,
            weights: self.weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let (_, pen, ret) = self.weights.coefficients();
        let min_batch = if pen != 0.0 || ret != 0.0 { 4 } else { 2 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size must be at least {min_batch} with these loss weights, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Objectives

/// Mean negative log-probability of the true class.
pub fn cross_entropy(g: &mut Graph, logprobs: Var, y: &[usize]) -> Result<Var> {
    let (n, k) = g.value(logprobs).expect_matrix("cross_entropy")?;
    if y.len() != n {
        return Err(Error::dim(format!("cross_entropy: {} labels for {n} rows", y.len())));
    }
    if let Some(bad) = y.iter().find(|&&c| c >= k) {
        return Err(Error::Encoding(format!("label {bad} is outside 0..{k}")));
    }
    let picked = g.pick_columns(logprobs, y)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}

/// Component values of one loss evaluation. Inactive terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub dc_z: Option<f64>,
    pub dc_y: Option<f64>,
}

#[derive(Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub forward: Forward,
    pub parts: LossParts,
}

fn weighted(g: &mut Graph, v: Var, w: f64) -> Result<Var> {
    if w == 1.0 {
        Ok(v)
    } else {
        g.scale(v, w)
    }
}

fn assemble(
    g: &mut Graph,
    model: &ModelParams,
    batch: &LabeledDataset,
    objective: Objective,
    mode: Mode,
) -> Result<LossOutput> {
    let Objective { criterion, weights } = objective;
    weights.validate()?;
    let (w_ce, w_pen, w_ret) = weights.coefficients();
    let x = g.constant(batch.x.to_tensor());
    let forward = model.forward(g, x, mode)?;
    let ce = cross_entropy(g, forward.logprobs, &batch.y)?;
    let latent = forward.latent;
    let mut loss = weighted(g, ce, w_ce)?;
    let mut parts = LossParts {
        ce: g.value(ce).item(),
        ..Default::default()
    };
    if w_ret != 0.0 {
        let y = one_hot(&batch.y, batch.k)?;
        let dc_y = dc_fast_node(g, &y, latent)?;
        parts.dc_y = Some(g.value(dc_y).item());
        let term = weighted(g, dc_y, w_ret)?;
        loss = g.sub(loss, term)?;
    }
    if w_pen != 0.0 {
        let dc_z = match criterion {
            Criterion::Independence => dc_fast_node(g, &batch.z, latent)?,
            Criterion::Separation => {
                dc_conditional_node(g, &batch.z, latent, &batch.y, batch.k)
                    .map_err(|e| match e {
                        Error::InsufficientSamples(msg) => Error::InsufficientSamples(format!(
                            "separation penalty needs a class with at least 4 samples in the batch: {msg}"
                        )),
                        other => other,
                    })?
                    .0
            }
        };
        parts.dc_z = Some(g.value(dc_z).item());
        let term = weighted(g, dc_z, w_pen)?;
        loss = g.add(loss, term)?;
    }
    parts.total = g.value(loss).item();
    Ok(LossOutput { loss, forward, parts })
}

/// Independence objective on one batch: cross-entropy plus a DC(Z, latent)
/// penalty, minus a DC(Y, latent) retention term.
pub fn loss_independence(
    g: &mut Graph,
    model: &ModelParams,
    batch: &LabeledDataset,
    weights: LossWeights,
    mode: Mode,
) -> Result<LossOutput> {
    let objective = Objective {
        criterion: Criterion::Independence,
        weights,
    };
    assemble(g, model, batch, objective, mode)
}

/// Separation objective on one batch: as [`loss_independence`] with the
/// penalty conditioned on the label.
pub fn loss_separation(
    g: &mut Graph,
    model: &ModelParams,
    batch: &LabeledDataset,
    weights: LossWeights,
    mode: Mode,
) -> Result<LossOutput> {
    let objective = Objective {
        criterion: Criterion::Separation,
        weights,
    };
    assemble(g, model, batch, objective, mode)
}

/// The loss described by `objective` on one batch.
pub fn loss(
    g: &mut Graph,
    model: &ModelParams,
    batch: &LabeledDataset,
    objective: Objective,
    mode: Mode,
) -> Result<LossOutput> {
    assemble(g, model, batch, objective, mode)
}

// ---------------------------------------------------------------------------
// Optimizers

/// First-order optimizer over a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = |k: OptimizerKind| -> Vec<Vec<f64>> {
            if k == OptimizerKind::Adam {
                sizes.iter().map(|&s| vec![0.0; s]).collect()
            } else {
                Vec::new()
            }
        };
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(kind),
            v: zeros(kind),
        }
    }

    pub fn for_model(kind: OptimizerKind, lr: f64, model: &ModelParams) -> Self {
        let sizes: Vec<usize> = model.params.iter().map(|p| p.value.len()).collect();
        Optimizer::new(kind, lr, &sizes)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "optimizer: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, gr)) in params.iter().zip(grads).enumerate() {
            if p.shape() != gr.shape() {
                return Err(Error::dim(format!(
                    "optimizer: parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    gr.shape()
                )));
            }
            if self.kind == OptimizerKind::Adam && self.m.get(i).map(Vec::len) != Some(p.len()) {
                return Err(Error::dim(format!("optimizer state does not match parameter {i}")));
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, gr) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.t as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (i, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, d)) in p.data_mut().iter_mut().zip(gr.data()).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// One row of the training trajectory. Test metrics use eval-mode batch norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub dc_z: Option<f64>,
    pub dc_y: Option<f64>,
    pub test_accuracy: f64,
    pub tpr_gap: f64,
    pub mcdp_gap: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub trajectory: Vec<EpochRecord>,
}

/// Writes the trajectory as CSV with a header row.
pub fn write_trajectory(records: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Independent seed for stream `index` of a run seeded with `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index.wrapping_add(1));
    rng.next_u64()
}

fn test_metrics(model: &ModelParams, test: &LabeledDataset) -> Result<(f64, f64, f64)> {
    match evaluate(model, test, EvalOptions::default()) {
        Ok(r) => Ok((r.accuracy, r.tpr_gap, r.mcdp_gap)),
        Err(Error::MetricUndefined(msg)) => {
            log::warn!("test metrics undefined: {msg}");
            Ok((f64::NAN, f64::NAN, f64::NAN))
        }
        Err(e) => Err(e),
    }
}

/// Builds the dense network from `spec` with `cfg.seed` and trains it.
pub fn train(splits: &Splits, spec: NetworkSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if spec.input_dim != splits.train.p() || spec.output_classes != splits.train.k {
        return Err(Error::Config(format!(
            "network expects p={} K={}, data has p={} K={}",
            spec.input_dim,
            spec.output_classes,
            splits.train.p(),
            splits.train.k
        )));
    }
    let model = build(spec, cfg.seed)?;
    train_model(splits, model, cfg)
}

/// Trains `model` in place of a freshly built one. Every epoch shuffles the
/// training split, steps all parameters once per minibatch and records test
/// metrics. A non-finite loss or gradient aborts with the last finite
/// parameters attached to the error.
pub fn train_model(splits: &Splits, mut model: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = &splits.train;
    if train.p() != model.arch.input_dim() || train.k != model.arch.classes() {
        return Err(Error::Config("model does not match the training data shape".into()));
    }
    let mut opt = Optimizer::for_model(cfg.optimizer, cfg.lr, &model);
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let plan = batches(
            &train.y,
            train.k,
            cfg.batch_size.min(train.n()),
            derive_seed(cfg.seed, epoch as u64),
            cfg.stratified_batches,
        )?;
        let mut sums = LossParts::default();
        let (mut sum_z, mut sum_y) = (0.0, 0.0);
        for (step, idx) in plan.iter().enumerate() {
            let batch = train.subset(idx);
            let mut g = Graph::new();
            let out = loss(&mut g, &model, &batch, cfg.objective(), Mode::Train)?;
            let diverged = |loss: f64, model: &ModelParams| Error::Divergence {
                epoch,
                step,
                loss,
                checkpoint: Box::new(model.clone()),
            };
            if !out.parts.total.is_finite() {
                return Err(diverged(out.parts.total, &model));
            }
            g.backward(out.loss)?;
            let grads: Vec<Tensor> = out
                .forward
                .param_vars
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                .collect();
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(diverged(f64::NAN, &model));
            }
            opt.step(model.params.iter_mut().map(|p| &mut p.value), &grads)?;
            model.commit_moments(&out.forward.moments);
            sums.total += out.parts.total;
            sums.ce += out.parts.ce;
            if let Some(v) = out.parts.dc_z {
                sum_z += v;
                sums.dc_z = Some(sum_z);
            }
            if let Some(v) = out.parts.dc_y {
                sum_y += v;
                sums.dc_y = Some(sum_y);
            }
        }
        if !model.params.iter().all(|p| p.value.all_finite()) {
            return Err(Error::Divergence {
                epoch,
                step: plan.len(),
                loss: f64::NAN,
                checkpoint: Box::new(model),
            });
        }
        let nb = plan.len() as f64;
        let (test_accuracy, tpr_gap, mcdp_gap) = test_metrics(&model, &splits.test)?;
        let rec = EpochRecord {
            epoch,
            loss: sums.total / nb,
            ce: sums.ce / nb,
            dc_z: sums.dc_z.map(|s| s / nb),
            dc_y: sums.dc_y.map(|s| s / nb),
            test_accuracy,
            tpr_gap,
            mcdp_gap,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} ce {:.5} acc {:.2} tpr {:.2} mcdp {:.2}",
            rec.loss,
            rec.ce,
            rec.test_accuracy,
            rec.tpr_gap,
            rec.mcdp_gap
        );
        trajectory.push(rec);
    }
    Ok(TrainOutcome { model, trajectory })
}

/// The Standard baseline: a one-hidden-layer classifier trained with plain
/// cross-entropy on the raw features.
pub fn train_standard(splits: &Splits, hidden: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = build_probe(splits.train.p(), hidden, splits.train.k, cfg.seed)?;
    let cfg = TrainConfig {
        weights: LossWeights::cross_entropy_only(),
        ..cfg.clone()
    };
    train_model(splits, model, &cfg)
}

/// Replaces every split's features with the frozen model's eval-mode latent.
pub fn representations(model: &ModelParams, splits: &Splits) -> Result<Splits> {
    let map = |d: &LabeledDataset| -> Result<LabeledDataset> {
        let (latent, _) = model.predict(&d.x.to_tensor())?;
        d.with_features(crate::dependence::SampleMatrix::from_tensor(&latent)?)
    };
    Ok(Splits {
        train: map(&splits.train)?,
        val: map(&splits.val)?,
        test: map(&splits.test)?,
    })
}

/// Trains a fresh unconstrained classifier on the frozen representation of
/// `model` and reports its test metrics.
pub fn train_probe(
    model: &ModelParams,
    splits: &Splits,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, FairnessReport)> {
    let mapped = representations(model, splits)?;
    let out = train_standard(&mapped, hidden, cfg)?;
    let report = evaluate(&out.model, &mapped.test, EvalOptions::default())?;
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Hyperparameter selection

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateResult {
    pub alpha: f64,
    pub seed: u64,
    pub val_accuracy: f64,
    pub val_tpr_gap: f64,
    pub val_mcdp_gap: f64,
}

impl CandidateResult {
    /// Mean of the two gaps, the quantity minimized during selection.
    pub fn gap_score(&self) -> f64 {
        (self.val_tpr_gap + self.val_mcdp_gap) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub chosen_index: usize,
    pub chosen_alpha: f64,
    pub baseline_accuracy: f64,
    /// Accuracy a candidate needs to pass the filter.
    pub threshold: f64,
    pub passed: Vec<bool>,
    /// Set when no candidate passed and the most accurate one was returned.
    pub flagged: bool,
    pub candidates: Vec<CandidateResult>,
}

pub const ACCURACY_FILTER: f64 = 0.95;

/// Among candidates whose accuracy reaches 95% of the baseline, returns the
/// one with the smallest mean gap (earliest wins ties). Without any passing
/// candidate, returns the most accurate one and flags the selection.
pub fn choose_alpha(candidates: &[CandidateResult], baseline_accuracy: f64) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("no alpha candidates".into()));
    }
    let threshold = ACCURACY_FILTER * baseline_accuracy;
    let passed: Vec<bool> = candidates.iter().map(|c| c.val_accuracy >= threshold).collect();
    let better = |a: f64, b: f64| a.total_cmp(&b) == std::cmp::Ordering::Less;
    let mut chosen: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if passed[i] && chosen.is_none_or(|j| better(c.gap_score(), candidates[j].gap_score())) {
            chosen = Some(i);
        }
    }
    let flagged = chosen.is_none();
    let chosen_index = chosen.unwrap_or_else(|| {
        let mut best = 0;
        for (i, c) in candidates.iter().enumerate() {
            if better(candidates[best].val_accuracy, c.val_accuracy) {
                best = i;
            }
        }
        best
    });
    Ok(Selection {
        chosen_index,
        chosen_alpha: candidates[chosen_index].alpha,
        baseline_accuracy,
        threshold,
        passed,
        flagged,
        candidates: candidates.to_vec(),
    })
}

/// Trains one model per alpha (up to `threads` at a time, each with a seed
/// derived from `cfg.seed`), scores them on the validation split and
/// applies [`choose_alpha`]. Returns the selection and the trained models in
/// candidate order.
pub fn select_alpha(
    alphas: &[f64],
    splits: &Splits,
    spec: NetworkSpec,
    cfg: &TrainConfig,
    baseline_accuracy: f64,
    threads: usize,
) -> Result<(Selection, Vec<TrainOutcome>)> {
    if alphas.is_empty() {
        return Err(Error::Config("no alpha candidates".into()));
    }
    let retain_target = match cfg.weights {
        LossWeights::Alpha { retain_target, .. } => retain_target,
        LossWeights::LambdaMu { .. } => true,
    };
    let jobs: Vec<(usize, TrainConfig)> = alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let c = TrainConfig {
                weights: LossWeights::Alpha { alpha, retain_target },
                seed: derive_seed(cfg.seed, 1_000_000 + i as u64),
                ..cfg.clone()
            };
            c.validate().map(|_| (i, c))
        })
        .collect::<Result<_>>()?;
    let run = |c: &TrainConfig| -> Result<(CandidateResult, TrainOutcome)> {
        let out = train(splits, spec, c)?;
        let r = evaluate(&out.model, &splits.val, EvalOptions::default())?;
        let alpha = match c.weights {
            LossWeights::Alpha { alpha, .. } => alpha,
            LossWeights::LambdaMu { .. } => unreachable!(),
        };
        Ok((
            CandidateResult {
                alpha,
                seed: c.seed,
                val_accuracy: r.accuracy,
                val_tpr_gap: r.tpr_gap,
                val_mcdp_gap: r.mcdp_gap,
            },
            out,
        ))
    };
    let threads = threads.max(1);
    let mut results: Vec<Option<Result<(CandidateResult, TrainOutcome)>>> = (0..jobs.len()).map(|_| None).collect();
    for chunk in jobs.chunks(threads) {
        if chunk.len() == 1 {
            results[chunk[0].0] = Some(run(&chunk[0].1));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|(i, c)| (*i, s.spawn(|| run(c)))).collect();
            for (i, h) in handles {
                results[i] = Some(h.join().expect("candidate thread panicked"));
            }
        });
    }
    let mut scored = Vec::with_capacity(jobs.len());
    let mut outcomes = Vec::with_capacity(jobs.len());
    for r in results {
        let (c, o) = r.expect("every candidate ran")?;
        scored.push(c);
        outcomes.push(o);
    }
    Ok((choose_alpha(&scored, baseline_accuracy)?, outcomes))
}
