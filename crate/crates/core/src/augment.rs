//! Task augmentation: horizontal flip, colour jitter and relative depth
//! noise. All magnitudes default to zero, in which case augmentation is
//! the bitwise identity.

use crate::error::{Error, Result};
use crate::scenes::FineGrainedTask;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Probability of mirroring image, depth and mask horizontally.
    pub flip_prob: f64,
    /// Per-channel multiplicative jitter: factors in [1-j, 1+j].
    pub color_jitter: f64,
    /// Per-pixel relative depth perturbation in [1-n, 1+n].
    pub depth_noise: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { flip_prob: 0.0, color_jitter: 0.0, depth_noise: 0.0 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        for (name, v) in [("color_jitter", self.color_jitter), ("depth_noise", self.depth_noise)]
        {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob == 0.0 && self.color_jitter == 0.0 && self.depth_noise == 0.0
    }
}

/// Mirrors a `[C, H, W]` tensor along the width axis.
fn flip_tensor_lr<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let w = *t.shape().last().unwrap();
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

/// Pure horizontal mirror of a whole task (image, depth, mask).
pub fn flip_lr<T: Scalar>(task: &FineGrainedTask<T>) -> FineGrainedTask<T> {
    FineGrainedTask {
        image: flip_tensor_lr(&task.image),
        depth: flip_tensor_lr(&task.depth),
        valid: task.valid.flip_lr(),
        scene_id: task.scene_id,
        frame_id: task.frame_id,
    }
}

/// Applies the augmentations in a fixed draw order: flip decision, three
/// jitter factors, then per-pixel depth noise. A spec with all magnitudes
/// zero returns the task bitwise unchanged and consumes no randomness.
pub fn augment<T: Scalar>(
    task: &FineGrainedTask<T>,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<FineGrainedTask<T>> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(task.clone());
    }
    let mut out = task.clone();

    if spec.flip_prob > 0.0 && rng.gen::<f64>() < spec.flip_prob {
        out = flip_lr(&out);
    }

    if spec.color_jitter > 0.0 {
        let (h, w) = (out.image.shape()[1], out.image.shape()[2]);
        let n = h * w;
        for c in 0..3 {
            let f = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * spec.color_jitter;
            let f = T::from_f64(f);
            for v in &mut out.image.data_mut()[c * n..(c + 1) * n] {
                *v = (*v * f).min(T::one()).max(T::zero());
            }
        }
    }

    if spec.depth_noise > 0.0 {
        let floor = T::from_f64(1e-3);
        for v in out.depth.data_mut() {
            if *v > T::zero() {
                let f = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * spec.depth_noise;
                *v = (*v * T::from_f64(f)).max(floor);
            }
        }
    }

    Ok(out)
}
