//! Encoder-decoder depth regression network and its gradient engine.
//!
//! Architecture: a stack of strided 3x3 conv + ELU encoder blocks, a
//! decoder head of (3x3 conv -> ELU -> bilinear 2x upsample) blocks with
//! optional skip concatenations from encoder outputs, and a final 3x3 conv
//! into a single sigmoid channel.
//!
//! Gradients are computed layer-wise: [`Network::begin_forward`] records
//! the activations each adjoint needs, a loss is recorded on the returned
//! [`ForwardPass`], and [`ForwardPass::backward`] consumes the pass to
//! produce parameter gradients. Consuming `self` makes a second backward
//! through the same pass a compile error rather than a runtime bug.

pub mod loss;
pub mod ops;

pub use loss::{l2_loss, IdentityMap, OutputMap};

use crate::error::{Error, Result};
use crate::params::{ParamVector, Segment};
use crate::tensor::{Mask, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One encoder block: 3x3 conv (padding 1) followed by ELU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderBlock {
    pub channels: usize,
    pub stride: usize,
}

/// Skip connection: the ELU output of encoder block `from_encoder` is
/// concatenated onto the input of head block `to_head`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skip {
    pub from_encoder: usize,
    pub to_head: usize,
}

/// Static description of the network. Validated once by
/// [`NetworkSpec::validate`]; [`Network`] construction re-validates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Input image size as (height, width).
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub encoder: Vec<EncoderBlock>,
    /// Output channels of each head block; each block upsamples 2x.
    pub head_channels: Vec<usize>,
    #[serde(default)]
    pub skips: Vec<Skip>,
}

impl NetworkSpec {
    /// Small network for fast desk-scale experiments on 32x32 inputs.
    pub fn desk() -> Self {
        NetworkSpec {
            input_size: (32, 32),
            input_channels: 3,
            encoder: vec![
                EncoderBlock { channels: 8, stride: 2 },
                EncoderBlock { channels: 16, stride: 2 },
            ],
            head_channels: vec![16, 8],
            skips: vec![Skip { from_encoder: 0, to_head: 1 }],
        }
    }

    /// Full-size configuration: five-stage encoder over 256x256 inputs and
    /// a five-block decoder head with skip connections at every scale.
    pub fn full() -> Self {
        NetworkSpec {
            input_size: (256, 256),
            input_channels: 3,
            encoder: vec![
                EncoderBlock { channels: 16, stride: 2 },
                EncoderBlock { channels: 32, stride: 2 },
                EncoderBlock { channels: 64, stride: 2 },
                EncoderBlock { channels: 128, stride: 2 },
                EncoderBlock { channels: 256, stride: 2 },
            ],
            head_channels: vec![256, 128, 64, 32, 16],
            skips: vec![
                Skip { from_encoder: 3, to_head: 1 },
                Skip { from_encoder: 2, to_head: 2 },
                Skip { from_encoder: 1, to_head: 3 },
                Skip { from_encoder: 0, to_head: 4 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        if self.encoder.is_empty() {
            return Err(Error::Config("encoder block list is empty".into()));
        }
        if self.head_channels.is_empty() {
            return Err(Error::Config("head channel list is empty".into()));
        }
        if self.head_channels.iter().any(|&c| c == 0)
            || self.encoder.iter().any(|b| b.channels == 0)
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let mut downs = 0u32;
        let (mut ch, mut cw) = (h, w);
        for (i, b) in self.encoder.iter().enumerate() {
            match b.stride {
                1 => {}
                2 => {
                    if ch % 2 != 0 || cw % 2 != 0 {
                        return Err(Error::Config(format!(
                            "encoder block {i}: stride 2 needs even input, got {ch}x{cw}"
                        )));
                    }
                    ch /= 2;
                    cw /= 2;
                    downs += 1;
                }
                s => {
                    return Err(Error::Config(format!(
                        "encoder block {i}: stride must be 1 or 2, got {s}"
                    )))
                }
            }
        }
        if downs as usize != self.head_channels.len() {
            return Err(Error::Config(format!(
                "{downs} stride-2 encoder blocks but {} upsampling head blocks; \
                 output size would not match input size",
                self.head_channels.len()
            )));
        }
        let mut seen_to = std::collections::HashSet::new();
        for s in &self.skips {
            if s.from_encoder >= self.encoder.len() {
                return Err(Error::Config(format!(
                    "skip source {} out of range ({} encoder blocks)",
                    s.from_encoder,
                    self.encoder.len()
                )));
            }
            if s.to_head == 0 || s.to_head >= self.head_channels.len() {
                return Err(Error::Config(format!(
                    "skip target {} out of range (head blocks 1..{})",
                    s.to_head,
                    self.head_channels.len()
                )));
            }
            if !seen_to.insert(s.to_head) {
                return Err(Error::Config(format!(
                    "head block {} has more than one skip connection",
                    s.to_head
                )));
            }
        }
        // Spatial compatibility of each skip is checked during planning.
        Plan::build(self).map(|_| ())
    }

    /// SHA-256 of the canonical JSON encoding; identifies the architecture
    /// in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("network spec serialises");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().into()
    }
}

/// Per-layer channel and spatial bookkeeping derived from a spec.
#[derive(Debug, Clone)]
struct Plan {
    /// (channels, h, w) of the input to each encoder conv.
    enc_in: Vec<(usize, usize, usize)>,
    /// (channels, h, w) of the input to each head conv, concat included.
    head_in: Vec<(usize, usize, usize)>,
    /// For each head block, the encoder block whose output is concatenated.
    skip_into: Vec<Option<usize>>,
}

impl Plan {
    fn build(spec: &NetworkSpec) -> Result<Plan> {
        let (mut h, mut w) = spec.input_size;
        let mut ch = spec.input_channels;
        let mut enc_in = Vec::new();
        let mut enc_out = Vec::new();
        for b in &spec.encoder {
            enc_in.push((ch, h, w));
            if b.stride == 2 {
                h /= 2;
                w /= 2;
            }
            ch = b.channels;
            enc_out.push((ch, h, w));
        }

        let mut skip_into = vec![None; spec.head_channels.len()];
        for s in &spec.skips {
            skip_into[s.to_head] = Some(s.from_encoder);
        }

        let mut head_in = Vec::new();
        for (j, &out_ch) in spec.head_channels.iter().enumerate() {
            if let Some(src) = skip_into[j] {
                let (sc, sh, sw) = enc_out[src];
                if sh != h || sw != w {
                    return Err(Error::Config(format!(
                        "skip from encoder {src} ({sh}x{sw}) to head {j} ({h}x{w}): \
                         spatial sizes differ"
                    )));
                }
                ch += sc;
            }
            head_in.push((ch, h, w));
            ch = out_ch;
            h *= 2;
            w *= 2;
        }
        debug_assert_eq!((h, w), spec.input_size);
        Ok(Plan { enc_in, head_in, skip_into })
    }
}

/// A validated network. Parameters live outside in a [`ParamVector`]; the
/// network itself is immutable and cheap to share.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    plan: Plan,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let plan = Plan::build(&spec)?;
        Ok(Network { spec, plan })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Segment names and shapes in layout order, values zeroed.
    pub fn param_template<T: Scalar>(&self) -> ParamVector<T> {
        let mut segs = Vec::new();
        for (i, b) in self.spec.encoder.iter().enumerate() {
            let (ci, _, _) = self.plan.enc_in[i];
            segs.push(zseg::<T>(&format!("enc{i}.w"), vec![b.channels, ci, 3, 3]));
            segs.push(zseg::<T>(&format!("enc{i}.b"), vec![b.channels]));
        }
        for (j, &co) in self.spec.head_channels.iter().enumerate() {
            let (ci, _, _) = self.plan.head_in[j];
            segs.push(zseg::<T>(&format!("head{j}.w"), vec![co, ci, 3, 3]));
            segs.push(zseg::<T>(&format!("head{j}.b"), vec![co]));
        }
        let last = *self.spec.head_channels.last().unwrap();
        segs.push(zseg::<T>("final.w", vec![1, last, 3, 3]));
        segs.push(zseg::<T>("final.b", vec![1]));
        ParamVector::new(segs).expect("template layout is consistent")
    }

    /// Fan-in scaled uniform initialisation: each weight is drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases start at zero. Draws are
    /// made in f64 in a fixed order, so f32 parameters are the exact
    /// rounding of the f64 ones for the same seed.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pv = self.param_template::<T>();
        for seg in pv.segments_mut() {
            if seg.name.ends_with(".b") {
                continue; // biases stay zero
            }
            let fan_in: usize = seg.shape[1] * seg.shape[2] * seg.shape[3];
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in seg.values.iter_mut() {
                let u: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                *v = T::from_f64(u * bound);
            }
        }
        pv
    }

    pub fn num_params(&self) -> usize {
        self.param_template::<f32>().len()
    }

    fn check_params<T: Scalar>(&self, params: &ParamVector<T>) -> Result<()> {
        self.param_template::<T>().check_same_layout(params)
    }

    /// Runs the network and returns raw sigmoid-space predictions
    /// `[B, 1, H, W]` without recording anything for backward.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        images: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.begin_forward(params, images)?.into_prediction())
    }

    /// Runs the network while recording the activations needed for a
    /// subsequent backward pass.
    pub fn begin_forward<'n, T: Scalar>(
        &'n self,
        params: &'n ParamVector<T>,
        images: &Tensor<T>,
    ) -> Result<ForwardPass<'n, T>> {
        self.check_params(params)?;
        let [b, c, h, w] = ops::dims4(images, "network input")?;
        if b == 0 {
            return Err(Error::EmptySupport("empty batch".into()));
        }
        if c != self.spec.input_channels || (h, w) != self.spec.input_size {
            return Err(Error::Shape(format!(
                "input {:?} does not match spec ({} channels, {:?})",
                images.shape(),
                self.spec.input_channels,
                self.spec.input_size
            )));
        }
        images.debug_ensure_finite("network input")?;

        let ne = self.spec.encoder.len();
        let nh = self.spec.head_channels.len();
        let mut enc_inputs = Vec::with_capacity(ne);
        let mut enc_acts = Vec::with_capacity(ne);
        let mut x = images.clone();
        for (i, blk) in self.spec.encoder.iter().enumerate() {
            let wseg = seg_tensor(params, 2 * i);
            let bseg = seg_tensor(params, 2 * i + 1);
            let pre = ops::conv3x3_forward(&x, &wseg, &bseg, blk.stride)?;
            let act = ops::elu_forward(&pre);
            act.debug_ensure_finite(&format!("encoder block {i} output"))?;
            enc_inputs.push(x);
            enc_acts.push(act.clone());
            x = act;
        }

        let mut head_inputs = Vec::with_capacity(nh);
        let mut head_acts = Vec::with_capacity(nh);
        for j in 0..nh {
            if let Some(src) = self.plan.skip_into[j] {
                x = ops::concat_channels(&x, &enc_acts[src])?;
            }
            let wseg = seg_tensor(params, 2 * ne + 2 * j);
            let bseg = seg_tensor(params, 2 * ne + 2 * j + 1);
            let pre = ops::conv3x3_forward(&x, &wseg, &bseg, 1)?;
            let act = ops::elu_forward(&pre);
            head_inputs.push(x);
            head_acts.push(act.clone());
            x = ops::upsample2x_forward(&act)?;
            x.debug_ensure_finite(&format!("head block {j} output"))?;
        }

        let wf = seg_tensor(params, 2 * ne + 2 * nh);
        let bf = seg_tensor(params, 2 * ne + 2 * nh + 1);
        let pre = ops::conv3x3_forward(&x, &wf, &bf, 1)?;
        let output = ops::sigmoid_forward(&pre);
        output.debug_ensure_finite("network output")?;

        Ok(ForwardPass {
            net: self,
            params,
            enc_inputs,
            enc_acts,
            head_inputs,
            head_acts,
            final_input: x,
            output,
            d_output: None,
        })
    }
}

fn zseg<T: Scalar>(name: &str, shape: Vec<usize>) -> Segment<T> {
    let n: usize = shape.iter().product();
    Segment { name: name.to_string(), shape, values: vec![T::zero(); n] }
}

/// Views segment `idx` of a parameter vector as a tensor (cloned; segments
/// are small relative to activations).
fn seg_tensor<T: Scalar>(params: &ParamVector<T>, idx: usize) -> Tensor<T> {
    let s = &params.segments()[idx];
    Tensor::new(s.shape.clone(), s.values.clone()).expect("segment shapes are consistent")
}

/// Builds a network and a freshly initialised parameter vector in one call.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<(Network, ParamVector<T>)> {
    let net = Network::new(spec.clone())?;
    let params = net.init_params::<T>(seed);
    Ok((net, params))
}

/// A completed forward pass holding recorded activations. Record a loss,
/// then call [`backward`](ForwardPass::backward).
pub struct ForwardPass<'n, T: Scalar> {
    net: &'n Network,
    params: &'n ParamVector<T>,
    enc_inputs: Vec<Tensor<T>>,
    enc_acts: Vec<Tensor<T>>,
    head_inputs: Vec<Tensor<T>>,
    head_acts: Vec<Tensor<T>>,
    final_input: Tensor<T>,
    output: Tensor<T>,
    d_output: Option<Tensor<T>>,
}

impl<'n, T: Scalar> ForwardPass<'n, T> {
    /// Raw sigmoid-space predictions `[B, 1, H, W]`.
    pub fn prediction(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn into_prediction(self) -> Tensor<T> {
        self.output
    }

    /// Records the batched masked L2 loss (mean over tasks of per-task
    /// mean squared error) and returns its value. `map` transforms raw
    /// predictions before comparison, e.g. into metric depth.
    pub fn record_l2_loss(
        &mut self,
        gt: &Tensor<T>,
        valids: &[Mask],
        map: &dyn OutputMap<T>,
    ) -> Result<T> {
        let (loss, d_pred) = loss::batch_l2_loss_and_grad(&self.output, gt, valids, map)?;
        self.d_output = Some(d_pred);
        Ok(loss)
    }

    /// Propagates the recorded loss gradient back to the parameters.
    /// Consumes the pass; a loss must have been recorded first.
    pub fn backward(self) -> Result<ParamVector<T>> {
        let d_output = self.d_output.ok_or_else(|| {
            Error::State("backward called before any loss was recorded on this pass".into())
        })?;

        let ne = self.net.spec.encoder.len();
        let nh = self.net.spec.head_channels.len();
        let mut grads = self.params.zeros_like();

        // Through the sigmoid and the final conv.
        let d_pre = ops::sigmoid_backward(&self.output, &d_output)?;
        let wf = seg_tensor(self.params, 2 * ne + 2 * nh);
        let (dwf, dbf, mut d_x) = ops::conv3x3_backward(&self.final_input, &wf, 1, &d_pre)?;
        store(&mut grads, 2 * ne + 2 * nh, dwf);
        store(&mut grads, 2 * ne + 2 * nh + 1, dbf);

        // Gradient flowing into each encoder activation (from skips and,
        // for the last encoder block, from the head trunk).
        let mut d_enc_act: Vec<Option<Tensor<T>>> = (0..ne).map(|_| None).collect();

        for j in (0..nh).rev() {
            let d_act = ops::upsample2x_backward(self.head_acts[j].shape(), &d_x)?;
            let d_pre = ops::elu_backward(&self.head_acts[j], &d_act)?;
            let w = seg_tensor(self.params, 2 * ne + 2 * j);
            let (dw, db, d_in) =
                ops::conv3x3_backward(&self.head_inputs[j], &w, 1, &d_pre)?;
            store(&mut grads, 2 * ne + 2 * j, dw);
            store(&mut grads, 2 * ne + 2 * j + 1, db);
            if let Some(src) = self.net.plan.skip_into[j] {
                let trunk_ch = self.head_inputs[j].shape()[1] - self.enc_acts[src].shape()[1];
                let (d_trunk, d_skip) = ops::split_channels(&d_in, trunk_ch)?;
                accumulate(&mut d_enc_act[src], d_skip)?;
                d_x = d_trunk;
            } else {
                d_x = d_in;
            }
        }
        // The head trunk's input is the last encoder activation.
        accumulate(&mut d_enc_act[ne - 1], d_x)?;

        for i in (0..ne).rev() {
            let d_act = d_enc_act[i]
                .take()
                .expect("every encoder activation receives a gradient");
            let d_pre = ops::elu_backward(&self.enc_acts[i], &d_act)?;
            let w = seg_tensor(self.params, 2 * i);
            let (dw, db, d_in) = ops::conv3x3_backward(
                &self.enc_inputs[i],
                &w,
                self.net.spec.encoder[i].stride,
                &d_pre,
            )?;
            store(&mut grads, 2 * i, dw);
            store(&mut grads, 2 * i + 1, db);
            if i > 0 {
                accumulate(&mut d_enc_act[i - 1], d_in)?;
            }
        }

        grads.ensure_finite("parameter gradients")?;
        Ok(grads)
    }
}

fn store<T: Scalar>(grads: &mut ParamVector<T>, idx: usize, t: Tensor<T>) {
    let seg = &mut grads.segments_mut()[idx];
    debug_assert_eq!(seg.shape, t.shape());
    seg.values = t.into_data();
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(t),
        Some(acc) => {
            if acc.shape() != t.shape() {
                return Err(Error::Shape("gradient accumulation shape mismatch".into()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a = *a + *b;
            }
        }
    }
    Ok(())
}
