//! Stage-1 prior learning: meta-initialization over fine-grained
//! single-pair tasks, plus the equal-compute baselines it is compared
//! against.
//!
//! The meta-learner treats every RGB-D pair as its own task. One
//! meta-iteration draws a batch of K tasks, runs L plain gradient steps
//! on that fixed batch starting from the current meta-parameters, then
//! pulls the meta-parameters a fraction `beta` of the way toward the
//! explored endpoint. All strategies here produce a `PriorResult` whose
//! parameters seed stage-2 supervised training.

use crate::error::{Error, Result};
use crate::optim::{sgd_step, AdamWParams, AdamWState};
use crate::params::ParamVector;
use crate::scenes::BatchSampler;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Anything that can score a batch of tasks and return the gradient of
/// that score with respect to the parameters. Implementations may keep
/// interior state (augmentation randomness) but must be deterministic
/// given their construction seed and call sequence.
pub trait Objective<T: Scalar> {
    fn num_tasks(&self) -> usize;

    /// Mean loss over the given task indices and its parameter gradient.
    fn loss_and_grad(&self, params: &ParamVector<T>, tasks: &[usize]) -> Result<(T, ParamVector<T>)>;
}

/// Meta-initialization settings. `epochs` passes over the task set;
/// each epoch holds `floor(n / tasks_per_iter)` meta-iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Passes over the task set (N).
    pub epochs: usize,
    /// Inner gradient steps per meta-iteration (L).
    pub inner_steps: usize,
    /// Tasks drawn per meta-iteration (K).
    pub tasks_per_iter: usize,
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Meta step size toward the explored parameters, in (0, 1].
    pub beta: f64,
    /// Seed for the task sampler stream.
    #[serde(default)]
    pub seed: u64,
}

impl MetaConfig {
    /// Full-scale settings: 5 epochs, 4 inner steps, 50 tasks per
    /// meta-iteration, alpha 1e-3, beta 0.5.
    pub fn full() -> Self {
        MetaConfig { epochs: 5, inner_steps: 4, tasks_per_iter: 50, alpha: 1e-3, beta: 0.5, seed: 0 }
    }

    /// Desk-scale settings sized for the small generator and network.
    /// The inner rate is much larger than at full scale: with plain SGD
    /// on the raw squared-depth loss, four steps at 3e-2 are what it
    /// takes for the exploration to move far enough to matter.
    pub fn desk() -> Self {
        MetaConfig { tasks_per_iter: 16, alpha: 3e-2, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner step count must be at least 1".into()));
        }
        if self.tasks_per_iter == 0 {
            return Err(Error::Config("tasks per meta-iteration must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        check_beta(self.beta)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("beta must lie in (0, 1], got {beta}")));
    }
    Ok(())
}

/// One logged point of a stage-1 run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTraceRow {
    pub epoch: usize,
    /// Meta-iteration (or optimizer step, for the baselines) within the
    /// epoch.
    pub meta_iter: usize,
    /// Mean inner-step loss for meta-strategies; query or batch loss for
    /// the others.
    pub loss: f64,
    /// Seconds since the run started.
    pub elapsed_s: f64,
}

/// Outcome of any stage-1 strategy.
#[derive(Debug, Clone)]
pub struct PriorResult<T: Scalar> {
    pub theta_prior: ParamVector<T>,
    pub trace: Vec<MetaTraceRow>,
    /// Number of `loss_and_grad` evaluations consumed; the equal-compute
    /// comparisons are stated in this unit.
    pub grad_evals: usize,
    pub wallclock_s: f64,
}

/// Mean loss over the last `window` trace rows, for comparing strategies
/// on a smoothed endpoint. `None` when the trace is empty.
pub fn smoothed_tail_loss(trace: &[MetaTraceRow], window: usize) -> Option<f64> {
    if trace.is_empty() || window == 0 {
        return None;
    }
    let tail = &trace[trace.len().saturating_sub(window)..];
    Some(tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
}

fn numeric_ctx(e: Error, what: &str, epoch: usize, iter: usize) -> Error {
    match e {
        Error::Numeric(m) => {
            Error::Numeric(format!("{m} ({what}, epoch {epoch}, meta-iteration {iter})"))
        }
        other => other,
    }
}

/// Runs `steps` gradient steps on one fixed task batch, starting from
/// `theta0`. Returns the endpoint and the loss before each step.
/// `alpha = 0` is allowed and leaves the parameters unchanged.
pub fn inner_explore<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    theta0: &ParamVector<T>,
    tasks: &[usize],
    alpha: f64,
    steps: usize,
) -> Result<(ParamVector<T>, Vec<f64>)> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let mut theta = theta0.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = obj.loss_and_grad(&theta, tasks)?;
        losses.push(loss.as_f64());
        theta = sgd_step(&theta, &grad, alpha)?;
    }
    Ok((theta, losses))
}

/// Pulls the meta-parameters toward the explored endpoint:
/// `theta + beta * (theta_explored - theta)`. At `beta = 1` this is the
/// endpoint itself, returned exactly.
pub fn reptile_meta_update<T: Scalar>(
    theta_meta: &ParamVector<T>,
    theta_explored: &ParamVector<T>,
    beta: f64,
) -> Result<ParamVector<T>> {
    check_beta(beta)?;
    theta_meta.check_same_layout(theta_explored)?;
    if beta == 1.0 {
        // Algebraically the endpoint; computing it avoids a rounding
        // detour through theta + (theta_e - theta).
        return Ok(theta_explored.clone());
    }
    let delta = theta_explored.sub(theta_meta)?;
    theta_meta.axpy(T::from_f64(beta), &delta)
}

/// Reptile-style prior learning. Each meta-iteration draws a fresh,
/// non-overlapping K-task batch from the epoch's shuffle, explores it
/// for L steps and moves the meta-parameters `beta` of the way toward
/// the result. Consumes exactly `epochs * floor(n/K) * inner_steps`
/// gradient evaluations.
pub fn run_prior_learning<T: Scalar, O: Objective<T> + ?Sized>(
    cfg: &MetaConfig,
    obj: &O,
    theta_init: &ParamVector<T>,
) -> Result<PriorResult<T>> {
    cfg.validate()?;
    let n = obj.num_tasks();
    let mut sampler = BatchSampler::new(n, cfg.tasks_per_iter, cfg.seed)?;
    let iters = sampler.batches_per_epoch();
    let start = Instant::now();
    let mut theta_meta = theta_init.clone();
    let mut trace = Vec::with_capacity(cfg.epochs * iters);
    let mut grad_evals = 0usize;
    for epoch in 0..cfg.epochs {
        for iter in 0..iters {
            let batch: Vec<usize> = sampler.next_batch().to_vec();
            let (explored, losses) =
                inner_explore(obj, &theta_meta, &batch, cfg.alpha, cfg.inner_steps)
                    .map_err(|e| numeric_ctx(e, "reptile", epoch, iter))?;
            grad_evals += cfg.inner_steps;
            theta_meta = reptile_meta_update(&theta_meta, &explored, cfg.beta)?;
            trace.push(MetaTraceRow {
                epoch,
                meta_iter: iter,
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    assert_eq!(grad_evals, cfg.epochs * iters * cfg.inner_steps, "gradient budget accounting");
    Ok(PriorResult { theta_prior: theta_meta, trace, grad_evals, wallclock_s: start.elapsed().as_secs_f64() })
}

/// First-order MAML-style variant. Each meta-iteration draws 2K tasks,
/// explores the first K (support) for L steps, then applies the query
/// half's gradient at the explored parameters directly to the
/// meta-parameters: `theta - beta * grad_query`. Trace rows record the
/// query loss.
pub fn run_fomaml<T: Scalar, O: Objective<T> + ?Sized>(
    cfg: &MetaConfig,
    obj: &O,
    theta_init: &ParamVector<T>,
) -> Result<PriorResult<T>> {
    cfg.validate()?;
    let n = obj.num_tasks();
    let k = cfg.tasks_per_iter;
    if 2 * k > n {
        return Err(Error::Config(format!(
            "support/query split needs 2K = {} tasks per meta-iteration but only {n} exist",
            2 * k
        )));
    }
    let mut sampler = BatchSampler::new(n, 2 * k, cfg.seed)?;
    let iters = sampler.batches_per_epoch();
    let start = Instant::now();
    let mut theta_meta = theta_init.clone();
    let mut trace = Vec::with_capacity(cfg.epochs * iters);
    let mut grad_evals = 0usize;
    for epoch in 0..cfg.epochs {
        for iter in 0..iters {
            let both: Vec<usize> = sampler.next_batch().to_vec();
            let (support, query) = both.split_at(k);
            let (explored, _) = inner_explore(obj, &theta_meta, support, cfg.alpha, cfg.inner_steps)
                .map_err(|e| numeric_ctx(e, "fomaml support", epoch, iter))?;
            let (q_loss, q_grad) = obj
                .loss_and_grad(&explored, query)
                .map_err(|e| numeric_ctx(e, "fomaml query", epoch, iter))?;
            grad_evals += cfg.inner_steps + 1;
            theta_meta = theta_meta.axpy(T::from_f64(-cfg.beta), &q_grad)?;
            theta_meta
                .ensure_finite("meta parameters")
                .map_err(|e| numeric_ctx(e, "fomaml update", epoch, iter))?;
            trace.push(MetaTraceRow {
                epoch,
                meta_iter: iter,
                loss: q_loss.as_f64(),
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    assert_eq!(grad_evals, cfg.epochs * iters * (cfg.inner_steps + 1), "gradient budget accounting");
    Ok(PriorResult { theta_prior: theta_meta, trace, grad_evals, wallclock_s: start.elapsed().as_secs_f64() })
}

/// Plain supervised pretraining used as an equal-compute stage-1
/// baseline: AdamW, one step per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// The pretraining grid evaluated as baselines: (lr, weight decay).
pub const PRETRAIN_GRID: [(f64, f64); 3] = [(1e-3, 1e-1), (3e-4, 1e-1), (3e-4, 1e-2)];

/// Baseline presets over [`PRETRAIN_GRID`]: 5 epochs at the given batch
/// size.
pub fn pretrain_presets(batch_size: usize, seed: u64) -> Vec<PretrainConfig> {
    PRETRAIN_GRID
        .iter()
        .map(|&(lr, weight_decay)| PretrainConfig { epochs: 5, batch_size, lr, weight_decay, seed })
        .collect()
}

pub fn run_simple_pretraining<T: Scalar, O: Objective<T> + ?Sized>(
    cfg: &PretrainConfig,
    obj: &O,
    theta_init: &ParamVector<T>,
) -> Result<PriorResult<T>> {
    cfg.validate()?;
    let mut sampler = BatchSampler::new(obj.num_tasks(), cfg.batch_size, cfg.seed)?;
    let iters = sampler.batches_per_epoch();
    let start = Instant::now();
    let mut adamw = AdamWState::new(
        theta_init,
        AdamWParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    let mut theta = theta_init.clone();
    let mut trace = Vec::with_capacity(cfg.epochs * iters);
    let mut grad_evals = 0usize;
    for epoch in 0..cfg.epochs {
        for iter in 0..iters {
            let batch: Vec<usize> = sampler.next_batch().to_vec();
            let (loss, grad) = obj
                .loss_and_grad(&theta, &batch)
                .map_err(|e| numeric_ctx(e, "pretraining", epoch, iter))?;
            grad_evals += 1;
            theta = adamw.step(&theta, &grad)?;
            trace.push(MetaTraceRow {
                epoch,
                meta_iter: iter,
                loss: loss.as_f64(),
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(PriorResult { theta_prior: theta, trace, grad_evals, wallclock_s: start.elapsed().as_secs_f64() })
}

/// Gradient-accumulation baseline: average `window` consecutive batch
/// gradients, all evaluated at the same parameters, then take one AdamW
/// step on the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradAccumConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of batch gradients averaged per optimizer step.
    pub window: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GradAccumConfig {
    /// Baseline preset: window of 4 at lr 0.0012.
    pub fn full(batch_size: usize, seed: u64) -> Self {
        GradAccumConfig { epochs: 5, batch_size, window: 4, lr: 1.2e-3, weight_decay: 0.01, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("accumulation window must be at least 1".into()));
        }
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
        .validate()
    }
}

/// Runs the accumulation baseline. A trailing partial window at the end
/// of the run is discarded rather than stepped on. With `window = 1`
/// this reproduces plain pretraining exactly: the mean of one gradient
/// is that gradient.
pub fn run_grad_accum<T: Scalar, O: Objective<T> + ?Sized>(
    cfg: &GradAccumConfig,
    obj: &O,
    theta_init: &ParamVector<T>,
) -> Result<PriorResult<T>> {
    cfg.validate()?;
    let mut sampler = BatchSampler::new(obj.num_tasks(), cfg.batch_size, cfg.seed)?;
    let iters = sampler.batches_per_epoch();
    let start = Instant::now();
    let mut adamw = AdamWState::new(
        theta_init,
        AdamWParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    let mut theta = theta_init.clone();
    let mut trace = Vec::new();
    let mut grad_evals = 0usize;
    let mut acc = theta_init.zeros_like();
    let mut loss_acc = 0.0f64;
    let mut filled = 0usize;
    for epoch in 0..cfg.epochs {
        let mut step_in_epoch = 0usize;
        for iter in 0..iters {
            let batch: Vec<usize> = sampler.next_batch().to_vec();
            let (loss, grad) = obj
                .loss_and_grad(&theta, &batch)
                .map_err(|e| numeric_ctx(e, "grad accumulation", epoch, iter))?;
            grad_evals += 1;
            acc.axpy_mut(T::one(), &grad)?;
            loss_acc += loss.as_f64();
            filled += 1;
            if filled == cfg.window {
                let mean = acc.scale(T::from_f64(1.0 / cfg.window as f64));
                theta = adamw.step(&theta, &mean)?;
                trace.push(MetaTraceRow {
                    epoch,
                    meta_iter: step_in_epoch,
                    loss: loss_acc / cfg.window as f64,
                    elapsed_s: start.elapsed().as_secs_f64(),
                });
                step_in_epoch += 1;
                acc = theta_init.zeros_like();
                loss_acc = 0.0;
                filled = 0;
            }
        }
    }
    Ok(PriorResult { theta_prior: theta, trace, grad_evals, wallclock_s: start.elapsed().as_secs_f64() })
}

/// One arm of a beta sweep. A diverged arm carries its error instead of
/// aborting the sweep.
#[derive(Debug)]
pub struct BetaArm<T: Scalar> {
    pub beta: f64,
    pub outcome: std::result::Result<PriorResult<T>, Error>,
}

/// Runs prior learning once per beta. Every arm starts from the same
/// initial parameters and replays the same batch sequence (same sampler
/// seed), so the arms differ only in the meta step size.
pub fn beta_sweep<T: Scalar, O: Objective<T> + ?Sized>(
    cfg: &MetaConfig,
    obj: &O,
    theta_init: &ParamVector<T>,
    betas: &[f64],
) -> Result<Vec<BetaArm<T>>> {
    if betas.is_empty() {
        return Err(Error::Config("beta sweep needs at least one beta".into()));
    }
    for &b in betas {
        check_beta(b)?;
    }
    let mut arms = Vec::with_capacity(betas.len());
    for &beta in betas {
        let arm_cfg = MetaConfig { beta, ..cfg.clone() };
        arms.push(BetaArm { beta, outcome: run_prior_learning(&arm_cfg, obj, theta_init) });
    }
    Ok(arms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Segment;

    /// Mean of per-task quadratics `1/2 ||theta - c_k||^2`; gradient is
    /// `theta - mean(c_k)`, so every routine here has a closed form.
    struct Quadratic {
        centers: Vec<Vec<f64>>,
    }

    impl Quadratic {
        fn dim(&self) -> usize {
            self.centers[0].len()
        }

        fn batch_mean(&self, tasks: &[usize]) -> Vec<f64> {
            let d = self.dim();
            let mut m = vec![0.0; d];
            for &t in tasks {
                for (j, v) in self.centers[t].iter().enumerate() {
                    m[j] += v;
                }
            }
            for v in &mut m {
                *v /= tasks.len() as f64;
            }
            m
        }
    }

    impl Objective<f64> for Quadratic {
        fn num_tasks(&self) -> usize {
            self.centers.len()
        }

        fn loss_and_grad(
            &self,
            params: &ParamVector<f64>,
            tasks: &[usize],
        ) -> Result<(f64, ParamVector<f64>)> {
            let theta = &params.segments()[0].values;
            let mut loss = 0.0;
            for &t in tasks {
                loss += 0.5
                    * self.centers[t]
                        .iter()
                        .zip(theta)
                        .map(|(c, x)| (x - c) * (x - c))
                        .sum::<f64>();
            }
            loss /= tasks.len() as f64;
            let mean = self.batch_mean(tasks);
            let grad = vec_params(theta.iter().zip(&mean).map(|(x, c)| x - c).collect());
            Ok((loss, grad))
        }
    }

    fn vec_params(values: Vec<f64>) -> ParamVector<f64> {
        let d = values.len();
        ParamVector::new(vec![Segment { name: "theta".into(), shape: vec![d], values }]).unwrap()
    }

    #[test]
    fn inner_explore_matches_closed_form() {
        // theta_L = c + (1 - alpha)^L (theta0 - c) on a single quadratic.
        let obj = Quadratic { centers: vec![vec![2.0, -1.0, 0.5]] };
        let theta0 = vec_params(vec![0.0, 0.0, 0.0]);
        let alpha = 0.3;
        for steps in [1usize, 2, 5] {
            let (theta, losses) = inner_explore(&obj, &theta0, &[0], alpha, steps).unwrap();
            let shrink = (1.0 - alpha).powi(steps as i32);
            for (j, c) in [2.0, -1.0, 0.5].iter().enumerate() {
                let expect = c + shrink * (0.0 - c);
                assert!((theta.segments()[0].values[j] - expect).abs() < 1e-12);
            }
            assert_eq!(losses.len(), steps);
            assert!(losses.windows(2).all(|w| w[1] < w[0]), "inner losses must decrease");
        }
    }

    #[test]
    fn inner_explore_with_zero_alpha_keeps_parameters() {
        let obj = Quadratic { centers: vec![vec![5.0, 5.0]] };
        let theta0 = vec_params(vec![1.0, -3.0]);
        let (theta, losses) = inner_explore(&obj, &theta0, &[0], 0.0, 7).unwrap();
        assert_eq!(theta.max_abs_diff(&theta0).unwrap(), 0.0);
        assert_eq!(losses.len(), 7);
        assert!(losses.iter().all(|&l| l == losses[0]));
    }

    #[test]
    fn meta_update_interpolates() {
        let a = vec_params(vec![1.0, 0.0]);
        let b = vec_params(vec![0.0, 1.0]);
        let mid = reptile_meta_update(&a, &b, 0.5).unwrap();
        assert_eq!(mid.segments()[0].values, vec![0.5, 0.5]);
        let full = reptile_meta_update(&a, &b, 1.0).unwrap();
        assert_eq!(full.segments()[0].values, vec![0.0, 1.0]);
        assert!(reptile_meta_update(&a, &b, 0.0).is_err());
        assert!(reptile_meta_update(&a, &b, 1.5).is_err());
    }

    #[test]
    fn prior_learning_matches_exact_geometric_contraction() {
        // Single task at c = 1, alpha = beta = 1/2, L = 2, T = 1: each
        // epoch multiplies the distance to c by 1 - beta (1 - (1-alpha)^L)
        // = 0.625. All quantities are dyadic, so equality is exact.
        let obj = Quadratic { centers: vec![vec![1.0]] };
        let theta0 = vec_params(vec![0.0]);
        let cfg = MetaConfig {
            epochs: 3,
            inner_steps: 2,
            tasks_per_iter: 1,
            alpha: 0.5,
            beta: 0.5,
            seed: 0,
        };
        let r = run_prior_learning(&cfg, &obj, &theta0).unwrap();
        assert_eq!(r.theta_prior.segments()[0].values[0], 1.0 - 0.625f64.powi(3));
        assert_eq!(r.theta_prior.segments()[0].values[0], 0.755859375);
        assert_eq!(r.grad_evals, 3 * 1 * 2);
        assert_eq!(r.trace.len(), 3);
    }

    #[test]
    fn single_step_full_beta_collapses_to_sgd() {
        // L = 1, beta = 1: the meta-update is exactly one SGD step on
        // each drawn batch. Replay the sampler stream and compare.
        let centers: Vec<Vec<f64>> =
            (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1, -(i as f64)]).collect();
        let obj = Quadratic { centers };
        let theta0 = vec_params(vec![0.3, -0.2, 0.9]);
        let cfg = MetaConfig {
            epochs: 4,
            inner_steps: 1,
            tasks_per_iter: 2,
            alpha: 0.05,
            beta: 1.0,
            seed: 11,
        };
        let r = run_prior_learning(&cfg, &obj, &theta0).unwrap();

        let mut sampler = BatchSampler::new(6, 2, 11).unwrap();
        let mut theta = theta0.clone();
        for _ in 0..4 * sampler.batches_per_epoch() {
            let batch: Vec<usize> = sampler.next_batch().to_vec();
            let (_, g) = obj.loss_and_grad(&theta, &batch).unwrap();
            theta = sgd_step(&theta, &g, 0.05).unwrap();
        }
        assert_eq!(r.theta_prior.max_abs_diff(&theta).unwrap(), 0.0);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let obj = Quadratic { centers: vec![vec![1.0], vec![2.0]] };
        let theta0 = vec_params(vec![0.25]);
        let cfg = MetaConfig {
            epochs: 0,
            inner_steps: 3,
            tasks_per_iter: 1,
            alpha: 0.1,
            beta: 0.5,
            seed: 0,
        };
        let r = run_prior_learning(&cfg, &obj, &theta0).unwrap();
        assert_eq!(r.theta_prior.max_abs_diff(&theta0).unwrap(), 0.0);
        assert!(r.trace.is_empty());
        assert_eq!(r.grad_evals, 0);
    }

    #[test]
    fn budget_counts_every_inner_step() {
        let centers: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let obj = Quadratic { centers };
        let theta0 = vec_params(vec![0.0]);
        let cfg = MetaConfig {
            epochs: 3,
            inner_steps: 4,
            tasks_per_iter: 3,
            alpha: 0.01,
            beta: 0.5,
            seed: 2,
        };
        let r = run_prior_learning(&cfg, &obj, &theta0).unwrap();
        // floor(10 / 3) = 3 meta-iterations per epoch.
        assert_eq!(r.grad_evals, 3 * 3 * 4);
        assert_eq!(r.trace.len(), 3 * 3);
        for row in &r.trace {
            assert!(row.loss.is_finite());
        }
    }

    #[test]
    fn divergent_run_reports_numeric_error_with_context() {
        let obj = Quadratic { centers: vec![vec![1.0]] };
        let theta0 = vec_params(vec![0.0]);
        let cfg = MetaConfig {
            epochs: 1,
            inner_steps: 4,
            tasks_per_iter: 1,
            alpha: 1e300,
            beta: 0.5,
            seed: 0,
        };
        let err = run_prior_learning(&cfg, &obj, &theta0).unwrap_err();
        match err {
            Error::Numeric(msg) => {
                assert!(msg.contains("epoch 0"), "missing context: {msg}");
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn fomaml_requires_twice_k_tasks() {
        let obj = Quadratic { centers: vec![vec![0.0]; 5] };
        let theta0 = vec_params(vec![0.0]);
        let cfg = MetaConfig {
            epochs: 1,
            inner_steps: 1,
            tasks_per_iter: 3,
            alpha: 0.1,
            beta: 0.5,
            seed: 0,
        };
        assert!(matches!(run_fomaml(&cfg, &obj, &theta0), Err(Error::Config(_))));
    }

    #[test]
    fn fomaml_contracts_on_shared_quadratic() {
        // All tasks share the same center, so the query gradient at the
        // explored point still points at it and the run must converge.
        let obj = Quadratic { centers: vec![vec![2.0, -1.0]; 8] };
        let theta0 = vec_params(vec![0.0, 0.0]);
        let cfg = MetaConfig {
            epochs: 20,
            inner_steps: 2,
            tasks_per_iter: 2,
            alpha: 0.2,
            beta: 0.5,
            seed: 3,
        };
        let r = run_fomaml(&cfg, &obj, &theta0).unwrap();
        let v = &r.theta_prior.segments()[0].values;
        assert!((v[0] - 2.0).abs() < 1e-3 && (v[1] + 1.0).abs() < 1e-3, "got {v:?}");
        assert_eq!(r.grad_evals, 20 * 2 * (2 + 1));
        let first = r.trace.first().unwrap().loss;
        let last = r.trace.last().unwrap().loss;
        assert!(last < first * 1e-3);
    }

    #[test]
    fn fomaml_closed_form_single_iteration() {
        // One meta-iteration, L = 1: explored = theta0 - alpha (theta0 -
        // cs); update = theta0 - beta (explored - cq).
        let obj = Quadratic { centers: vec![vec![4.0], vec![-2.0]] };
        let theta0 = vec_params(vec![1.0]);
        let cfg = MetaConfig {
            epochs: 1,
            inner_steps: 1,
            tasks_per_iter: 1,
            alpha: 0.25,
            beta: 0.5,
            seed: 9,
        };
        let r = run_fomaml(&cfg, &obj, &theta0).unwrap();
        // Recover the support/query order the sampler actually used.
        let mut sampler = BatchSampler::new(2, 2, 9).unwrap();
        let both: Vec<usize> = sampler.next_batch().to_vec();
        let cs = obj.centers[both[0]][0];
        let cq = obj.centers[both[1]][0];
        let explored = 1.0 - 0.25 * (1.0 - cs);
        let expect = 1.0 - 0.5 * (explored - cq);
        assert!((r.theta_prior.segments()[0].values[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn pretraining_converges_and_counts_evals() {
        let centers: Vec<Vec<f64>> = (0..8).map(|_| vec![3.0, -2.0]).collect();
        let obj = Quadratic { centers };
        let theta0 = vec_params(vec![0.0, 0.0]);
        let cfg = PretrainConfig { epochs: 150, batch_size: 4, lr: 0.05, weight_decay: 0.0, seed: 1 };
        let r = run_simple_pretraining(&cfg, &obj, &theta0).unwrap();
        assert_eq!(r.grad_evals, 150 * 2);
        let v = &r.theta_prior.segments()[0].values;
        assert!((v[0] - 3.0).abs() < 0.05 && (v[1] + 2.0).abs() < 0.05, "got {v:?}");
    }

    #[test]
    fn pretrain_presets_cover_the_grid() {
        let ps = pretrain_presets(50, 7);
        assert_eq!(ps.len(), 3);
        assert_eq!((ps[0].lr, ps[0].weight_decay), (1e-3, 1e-1));
        assert_eq!((ps[1].lr, ps[1].weight_decay), (3e-4, 1e-1));
        assert_eq!((ps[2].lr, ps[2].weight_decay), (3e-4, 1e-2));
        for p in &ps {
            assert_eq!(p.epochs, 5);
            p.validate().unwrap();
        }
    }

    #[test]
    fn window_one_accumulation_is_plain_pretraining() {
        let centers: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 * 0.3, -(i as f64)]).collect();
        let obj = Quadratic { centers };
        let theta0 = vec_params(vec![0.4, 0.1]);
        let plain = run_simple_pretraining(
            &PretrainConfig { epochs: 6, batch_size: 3, lr: 0.02, weight_decay: 0.01, seed: 5 },
            &obj,
            &theta0,
        )
        .unwrap();
        let accum = run_grad_accum(
            &GradAccumConfig {
                epochs: 6,
                batch_size: 3,
                window: 1,
                lr: 0.02,
                weight_decay: 0.01,
                seed: 5,
            },
            &obj,
            &theta0,
        )
        .unwrap();
        assert_eq!(plain.theta_prior.max_abs_diff(&accum.theta_prior).unwrap(), 0.0);
        assert_eq!(plain.trace.len(), accum.trace.len());
        for (a, b) in plain.trace.iter().zip(&accum.trace) {
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn accumulated_gradients_average_at_fixed_parameters() {
        // Two tasks, batch 1, window 2, one epoch: exactly one optimizer
        // step, on the mean of both gradients evaluated at theta0.
        let obj = Quadratic { centers: vec![vec![1.0], vec![5.0]] };
        let theta0 = vec_params(vec![0.0]);
        let cfg =
            GradAccumConfig { epochs: 1, batch_size: 1, window: 2, lr: 0.1, weight_decay: 0.0, seed: 8 };
        let r = run_grad_accum(&cfg, &obj, &theta0).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.grad_evals, 2);

        let (l1, g1) = obj.loss_and_grad(&theta0, &[0]).unwrap();
        let (l2, g2) = obj.loss_and_grad(&theta0, &[1]).unwrap();
        let mean = g1.add(&g2).unwrap().scale(0.5);
        let mut adamw = AdamWState::new(
            &theta0,
            AdamWParams { lr: 0.1, weight_decay: 0.0, ..Default::default() },
        )
        .unwrap();
        let manual = adamw.step(&theta0, &mean).unwrap();
        // Batch order does not matter here: the gradient mean is
        // symmetric, so the manual step must match bitwise.
        assert_eq!(r.trace[0].loss, (l1 + l2) / 2.0);
        assert_eq!(r.theta_prior.max_abs_diff(&manual).unwrap(), 0.0);
    }

    #[test]
    fn beta_sweep_replays_identical_batches_per_arm() {
        let centers: Vec<Vec<f64>> = (0..6).map(|i| vec![(i % 3) as f64]).collect();
        let obj = Quadratic { centers };
        let theta0 = vec_params(vec![0.0]);
        let cfg = MetaConfig {
            epochs: 2,
            inner_steps: 2,
            tasks_per_iter: 2,
            alpha: 0.1,
            beta: 0.5,
            seed: 4,
        };
        let arms = beta_sweep(&cfg, &obj, &theta0, &[0.25, 0.5, 0.25]).unwrap();
        assert_eq!(arms.len(), 3);
        let first = arms[0].outcome.as_ref().unwrap();
        let third = arms[2].outcome.as_ref().unwrap();
        // Same beta, same seed: bitwise identical arms.
        assert_eq!(first.theta_prior.max_abs_diff(&third.theta_prior).unwrap(), 0.0);
        // Different beta: same first-step loss (shared batch, shared
        // theta0) but different endpoint.
        let second = arms[1].outcome.as_ref().unwrap();
        assert_eq!(first.trace[0].loss, second.trace[0].loss);
        assert!(first.theta_prior.max_abs_diff(&second.theta_prior).unwrap() > 0.0);
    }

    #[test]
    fn smoothed_tail_averages_last_rows() {
        let rows: Vec<MetaTraceRow> = (0..5)
            .map(|i| MetaTraceRow { epoch: 0, meta_iter: i, loss: i as f64, elapsed_s: 0.0 })
            .collect();
        assert_eq!(smoothed_tail_loss(&rows, 2), Some(3.5));
        assert_eq!(smoothed_tail_loss(&rows, 10), Some(2.0));
        assert_eq!(smoothed_tail_loss(&[], 3), None);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = MetaConfig::full();
        good.validate().unwrap();
        assert!(MetaConfig { inner_steps: 0, ..good.clone() }.validate().is_err());
        assert!(MetaConfig { tasks_per_iter: 0, ..good.clone() }.validate().is_err());
        assert!(MetaConfig { alpha: 0.0, ..good.clone() }.validate().is_err());
        assert!(MetaConfig { alpha: -1.0, ..good.clone() }.validate().is_err());
        assert!(MetaConfig { beta: 0.0, ..good.clone() }.validate().is_err());
        assert!(MetaConfig { beta: 1.01, ..good.clone() }.validate().is_err());
        assert!(MetaConfig { beta: f64::NAN, ..good }.validate().is_err());
    }
}
