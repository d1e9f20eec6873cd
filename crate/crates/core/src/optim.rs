//! Parameter update rules: plain SGD and AdamW.

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::tensor::Scalar;

/// One step of vanilla gradient descent: `p - lr * g`.
pub fn sgd_step<T: Scalar>(
    params: &ParamVector<T>,
    grads: &ParamVector<T>,
    lr: f64,
) -> Result<ParamVector<T>> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("sgd learning rate must be finite and >= 0, got {lr}")));
    }
    let out = params.axpy(T::from_f64(-lr), grads)?;
    out.ensure_finite("sgd updated parameters")?;
    Ok(out)
}

/// AdamW hyperparameters. Weight decay is decoupled: applied directly to
/// the parameters, not mixed into the gradient moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("adamw lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("adamw {name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adamw eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "adamw weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First and second gradient moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<T: Scalar> {
    m: ParamVector<T>,
    v: ParamVector<T>,
    step: u64,
    hp: AdamWParams,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(layout: &ParamVector<T>, hp: AdamWParams) -> Result<Self> {
        hp.validate()?;
        Ok(AdamWState { m: layout.zeros_like(), v: layout.zeros_like(), step: 0, hp })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn hyperparams(&self) -> &AdamWParams {
        &self.hp
    }

    /// One AdamW update with bias correction:
    ///
    /// ```text
    /// m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
    /// p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p
    /// ```
    pub fn step(&mut self, params: &ParamVector<T>, grads: &ParamVector<T>) -> Result<ParamVector<T>> {
        params.check_same_layout(grads)?;
        params.check_same_layout(&self.m)?;
        self.step += 1;
        let b1 = T::from_f64(self.hp.beta1);
        let b2 = T::from_f64(self.hp.beta2);
        let one = T::one();
        // Bias-correction factors computed in f64 and cast once.
        let c1 = T::from_f64(1.0 - self.hp.beta1.powi(self.step as i32));
        let c2 = T::from_f64(1.0 - self.hp.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.hp.lr);
        let eps = T::from_f64(self.hp.eps);
        let wd = T::from_f64(self.hp.weight_decay);

        let mut out = params.clone();
        for (((po, go), mo), vo) in out
            .segments_mut()
            .iter_mut()
            .zip(grads.segments())
            .zip(self.m.segments_mut())
            .zip(self.v.segments_mut())
        {
            for (((p, &g), m), v) in po
                .values
                .iter_mut()
                .zip(&go.values)
                .zip(mo.values.iter_mut())
                .zip(vo.values.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps) - lr * wd * *p;
            }
        }
        out.ensure_finite("adamw updated parameters")?;
        Ok(out)
    }
}
