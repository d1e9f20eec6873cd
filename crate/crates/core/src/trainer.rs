//! Supervised depth training (stage 2) and the machinery it shares with
//! stage 1: the sigmoid-to-depth output conversion and the batched task
//! objective (network + dataset + loss).

use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::metainit::Objective;
use crate::net::{loss::OutputMap, Network, NetworkSpec};
use crate::optim::{AdamWParams, AdamWState};
use crate::params::ParamVector;
use crate::scenes::{BatchSampler, Dataset, FineGrainedTask};
use crate::tensor::{Mask, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

/// Maps the network's sigmoid output `s` in (0, 1) to metric depth by
/// interpolating linearly in inverse depth:
///
/// ```text
/// 1/depth = 1/d_max + s * (1/d_min - 1/d_max)
/// ```
///
/// so `s -> 0` approaches `d_max` and `s -> 1` approaches `d_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthConversion {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthConversion {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min > 0.0) || !(d_max > d_min) || !d_max.is_finite() {
            return Err(Error::Config(format!(
                "depth conversion range ({d_min}, {d_max}) must satisfy 0 < min < max"
            )));
        }
        Ok(DepthConversion { d_min, d_max })
    }

    #[inline]
    fn coeffs(&self) -> (f64, f64) {
        let a = 1.0 / self.d_max;
        (a, 1.0 / self.d_min - a)
    }

    #[inline]
    pub fn sigmoid_to_depth<T: Scalar>(&self, s: T) -> T {
        let (a, b) = self.coeffs();
        T::one() / (T::from_f64(a) + s * T::from_f64(b))
    }

    /// Inverse of [`sigmoid_to_depth`](Self::sigmoid_to_depth). Depths
    /// outside `[d_min, d_max]` map outside `[0, 1]`.
    #[inline]
    pub fn depth_to_sigmoid<T: Scalar>(&self, depth: T) -> T {
        let (a, b) = self.coeffs();
        (T::one() / depth - T::from_f64(a)) / T::from_f64(b)
    }
}

impl<T: Scalar> OutputMap<T> for DepthConversion {
    fn apply(&self, s: T) -> T {
        self.sigmoid_to_depth(s)
    }
    // d depth / d s = -b * depth^2.
    fn grad(&self, _s: T, y: T) -> T {
        let (_, b) = self.coeffs();
        -T::from_f64(b) * y * y
    }
}

/// Free-function form of the conversion, for single values.
pub fn sigmoid_to_depth<T: Scalar>(s: T, d_min: f64, d_max: f64) -> Result<T> {
    Ok(DepthConversion::new(d_min, d_max)?.sigmoid_to_depth(s))
}

/// Which space the regression loss compares in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// Convert predictions to metric depth and regress against ground
    /// truth depth.
    Depth,
    /// Regress raw sigmoid output against inverse-depth-normalised ground
    /// truth.
    InverseDepth,
}

/// Network + dataset + loss, exposed as a stage-agnostic objective over
/// task indices. Both training stages and all baselines drive this.
pub struct TaskObjective<'a, T: Scalar> {
    net: &'a Network,
    ds: &'a Dataset<T>,
    conversion: DepthConversion,
    space: LossSpace,
    augment: Option<(AugmentSpec, RefCell<ChaCha8Rng>)>,
}

impl<'a, T: Scalar> TaskObjective<'a, T> {
    pub fn new(
        net: &'a Network,
        ds: &'a Dataset<T>,
        conversion: DepthConversion,
        space: LossSpace,
    ) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptySupport("objective over an empty dataset".into()));
        }
        Ok(TaskObjective { net, ds, conversion, space, augment: None })
    }

    /// Enables augmentation with its own randomness stream. A zero spec is
    /// the identity and leaves trajectories unchanged.
    pub fn with_augment(mut self, spec: AugmentSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !spec.is_identity() {
            self.augment = Some((spec, RefCell::new(ChaCha8Rng::seed_from_u64(seed))));
        }
        Ok(self)
    }

    fn batch(&self, tasks: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<Mask>)> {
        match &self.augment {
            None => self.ds.assemble_batch(tasks),
            Some((spec, rng)) => {
                let mut rng = rng.borrow_mut();
                let mut augmented: Vec<FineGrainedTask<T>> = Vec::with_capacity(tasks.len());
                for &i in tasks {
                    let t = self.ds.tasks.get(i).ok_or_else(|| {
                        Error::Data(format!("task index {i} out of range"))
                    })?;
                    augmented.push(crate::augment::augment(t, spec, &mut rng)?);
                }
                stack_tasks(&augmented, self.ds.meta.image_size)
            }
        }
    }
}

fn stack_tasks<T: Scalar>(
    tasks: &[FineGrainedTask<T>],
    (h, w): (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>, Vec<Mask>)> {
    let b = tasks.len();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    let mut depths = Vec::with_capacity(b * h * w);
    let mut masks = Vec::with_capacity(b);
    for t in tasks {
        images.extend_from_slice(t.image.data());
        depths.extend_from_slice(t.depth.data());
        masks.push(t.valid.clone());
    }
    Ok((Tensor::new(vec![b, 3, h, w], images)?, Tensor::new(vec![b, 1, h, w], depths)?, masks))
}

impl<'a, T: Scalar> Objective<T> for TaskObjective<'a, T> {
    fn num_tasks(&self) -> usize {
        self.ds.len()
    }

    fn loss_and_grad(&self, params: &ParamVector<T>, tasks: &[usize]) -> Result<(T, ParamVector<T>)> {
        let (images, gt_depth, masks) = self.batch(tasks)?;
        let mut pass = self.net.begin_forward(params, &images)?;
        let loss = match self.space {
            LossSpace::Depth => pass.record_l2_loss(&gt_depth, &masks, &self.conversion)?,
            LossSpace::InverseDepth => {
                // Targets move into sigmoid space; invalid pixels are
                // never read by the loss, so map them to zero.
                let gt_s = gt_depth.map(|d| {
                    if d > T::zero() {
                        self.conversion.depth_to_sigmoid(d)
                    } else {
                        T::zero()
                    }
                });
                pass.record_l2_loss(&gt_s, &masks, &crate::net::IdentityMap)?
            }
        };
        let grads = pass.backward()?;
        Ok((loss, grads))
    }
}

/// Stage-2 supervised training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Metric depth range the sigmoid output spans.
    pub depth_range: (f64, f64),
    pub loss_space: LossSpace,
    /// Seed for the batch sampler stream.
    #[serde(default)]
    pub seed: u64,
}

impl SupervisedConfig {
    /// Full-scale defaults: 15 epochs of AdamW at 3e-4 with weight decay
    /// 0.01.
    pub fn full() -> Self {
        SupervisedConfig {
            epochs: 15,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.01,
            depth_range: (0.3, 10.0),
            loss_space: LossSpace::Depth,
            seed: 0,
        }
    }

    /// Desk-scale defaults matching the small generator and network.
    pub fn desk() -> Self {
        SupervisedConfig { epochs: 15, lr: 1e-3, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        DepthConversion::new(self.depth_range.0, self.depth_range.1).map(|_| ())
    }

    pub fn conversion(&self) -> DepthConversion {
        DepthConversion { d_min: self.depth_range.0, d_max: self.depth_range.1 }
    }
}

/// How a trained model came to be; carried in reports and checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Label of the stage-1 strategy ("reptile", "none", ...).
    pub stage1: String,
    pub master_seed: u64,
    /// Hex SHA-256 of the experiment configuration.
    pub config_hash: String,
}

/// A depth regressor: architecture, weights and output conversion.
#[derive(Debug, Clone)]
pub struct TrainedModel<T: Scalar> {
    pub spec: NetworkSpec,
    pub params: ParamVector<T>,
    pub depth_range: (f64, f64),
    pub provenance: Provenance,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn conversion(&self) -> DepthConversion {
        DepthConversion { d_min: self.depth_range.0, d_max: self.depth_range.1 }
    }

    /// Predicts metric depth `[B, 1, H, W]` for a batch of images.
    pub fn predict_depth(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let net = Network::new(self.spec.clone())?;
        let s = net.forward(&self.params, images)?;
        let conv = self.conversion();
        Ok(s.map(|v| conv.sigmoid_to_depth(v)))
    }

    /// Single-image convenience: `[3, H, W]` in, `[1, H, W]` out.
    pub fn predict_one(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = image.shape().to_vec();
        let (c, h, w) = match shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Shape(format!("single image {s:?}, want [C, H, W]"))),
        };
        let batched = Tensor::new(vec![1, c, h, w], image.data().to_vec())?;
        let out = self.predict_depth(&batched)?;
        Tensor::new(vec![1, h, w], out.into_data())
    }
}

/// One row of the stage-2 loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult<T: Scalar> {
    pub model: TrainedModel<T>,
    pub loss_trace: Vec<TraceRow>,
}

/// Runs supervised training from `theta_init` with AdamW. Batches come
/// from the epoch-partition sampler seeded by `cfg.seed`; one optimizer
/// step per batch.
pub fn run_supervised<T: Scalar>(
    net: &Network,
    ds: &Dataset<T>,
    theta_init: &ParamVector<T>,
    cfg: &SupervisedConfig,
) -> Result<TrainResult<T>> {
    run_supervised_with_augment(net, ds, theta_init, cfg, AugmentSpec::default(), 0)
}

pub fn run_supervised_with_augment<T: Scalar>(
    net: &Network,
    ds: &Dataset<T>,
    theta_init: &ParamVector<T>,
    cfg: &SupervisedConfig,
    augment: AugmentSpec,
    augment_seed: u64,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    let obj = TaskObjective::new(net, ds, cfg.conversion(), cfg.loss_space)?
        .with_augment(augment, augment_seed)?;
    let mut sampler = BatchSampler::new(ds.len(), cfg.batch_size, cfg.seed)?;
    let iters = sampler.batches_per_epoch();
    let mut adamw = AdamWState::new(
        theta_init,
        AdamWParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    let mut params = theta_init.clone();
    let mut trace = Vec::with_capacity(cfg.epochs * iters);
    for epoch in 0..cfg.epochs {
        for iter in 0..iters {
            let batch: Vec<usize> = sampler.next_batch().to_vec();
            let (loss, grads) = obj.loss_and_grad(&params, &batch).map_err(|e| match e {
                Error::Numeric(m) => {
                    Error::Numeric(format!("{m} (stage 2, epoch {epoch}, iteration {iter})"))
                }
                other => other,
            })?;
            params = adamw.step(&params, &grads)?;
            trace.push(TraceRow { epoch, iter, loss: loss.as_f64() });
        }
    }
    Ok(TrainResult {
        model: TrainedModel {
            spec: net.spec().clone(),
            params,
            depth_range: cfg.depth_range,
            provenance: Provenance::default(),
        },
        loss_trace: trace,
    })
}
