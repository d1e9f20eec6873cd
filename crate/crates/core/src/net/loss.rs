//! Masked L2 regression loss.
//!
//! The training loss averages squared error over valid pixels per task,
//! then over tasks, so every task in a batch carries equal weight
//! regardless of how many of its pixels are valid.

use crate::error::{Error, Result};
use crate::tensor::{Mask, Scalar, Tensor};

/// Element-wise transform applied to the network output before the loss
/// (e.g. the sigmoid-to-depth conversion). Identity by default.
pub trait OutputMap<T: Scalar>: Sync {
    fn apply(&self, s: T) -> T;
    /// Derivative of [`apply`](OutputMap::apply) at `s`; `y = apply(s)` is
    /// passed in so implementations can reuse it.
    fn grad(&self, s: T, y: T) -> T;
}

/// No transform: loss acts directly on the network output.
pub struct IdentityMap;

impl<T: Scalar> OutputMap<T> for IdentityMap {
    fn apply(&self, s: T) -> T {
        s
    }
    fn grad(&self, _s: T, _y: T) -> T {
        T::one()
    }
}

/// Masked mean squared error between two single-image maps of equal length.
/// Used for measurement; for training see `ForwardPass::record_l2_loss`.
pub fn l2_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, valid: &Mask) -> Result<T> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::Shape(format!(
            "l2 loss operands disagree: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let mut acc = T::zero();
    let mut n = 0usize;
    for ((&p, &g), &v) in pred.data().iter().zip(gt.data()).zip(valid.as_slice()) {
        if v {
            let d = p - g;
            acc = acc + d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySupport("l2 loss over a mask with no valid pixels".into()));
    }
    let loss = acc / T::from_f64(n as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric("l2 loss is not finite".into()));
    }
    Ok(loss)
}

/// Batched masked L2: mean over tasks of per-task mean squared error, with
/// the output map applied to predictions. Returns the loss and its gradient
/// with respect to the raw (pre-map) predictions.
///
/// `pred` and `gt` are `[B, 1, H, W]`; `valids` has one mask per task.
pub fn batch_l2_loss_and_grad<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valids: &[Mask],
    map: &dyn OutputMap<T>,
) -> Result<(T, Tensor<T>)> {
    let [b, c, h, w] = super::ops::dims4(pred, "loss predictions")?;
    if c != 1 {
        return Err(Error::Shape(format!("loss expects single-channel predictions, got {c}")));
    }
    if gt.shape() != pred.shape() {
        return Err(Error::Shape(format!(
            "loss targets {:?} do not match predictions {:?}",
            gt.shape(),
            pred.shape()
        )));
    }
    if valids.len() != b {
        return Err(Error::Shape(format!("{} masks for batch of {b}", valids.len())));
    }
    for m in valids {
        if m.h() != h || m.w() != w {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {h}x{w}",
                m.h(),
                m.w()
            )));
        }
    }

    let plane = h * w;
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut d_pred = Tensor::zeros(pred.shape());
    let mut total = T::zero();
    for bi in 0..b {
        let n = valids[bi].count_true();
        if n == 0 {
            return Err(Error::EmptySupport(format!("task {bi} has no valid pixels")));
        }
        let inv_n = T::one() / T::from_f64(n as f64);
        let base = bi * plane;
        let mut task_acc = T::zero();
        let mvals = valids[bi].as_slice();
        let (pd, gd) = (pred.data(), gt.data());
        let dd = d_pred.data_mut();
        for i in 0..plane {
            if !mvals[i] {
                continue;
            }
            let s = pd[base + i];
            let y = map.apply(s);
            let diff = y - gd[base + i];
            task_acc = task_acc + diff * diff;
            let two = T::from_f64(2.0);
            dd[base + i] = two * diff * map.grad(s, y) * inv_n * inv_b;
        }
        total = total + task_acc * inv_n;
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(Error::Numeric("batched l2 loss is not finite".into()));
    }
    Ok((loss, d_pred))
}
