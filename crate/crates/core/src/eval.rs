//! Depth evaluation: per-image error metrics, threshold accuracies and
//! the protocols for in-domain and zero-shot cross-domain scoring.
//!
//! All metrics are computed in f64 regardless of model precision.
//! Aggregation is the unweighted mean over images, never pooled over
//! pixels, so large images do not dominate.

use crate::error::{Error, Result};
use crate::par;
use crate::scenes::Dataset;
use crate::tensor::{Mask, Scalar, Tensor};
use crate::trainer::TrainedModel;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// One set of depth metrics. For a single image `n_images = 1`; for an
/// aggregate it counts the images averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Mean absolute error, metres.
    pub mae: f64,
    /// Mean |pred - gt| / gt.
    pub absrel: f64,
    /// Root mean squared error, metres.
    pub rmse: f64,
    /// RMSE of natural-log depths.
    pub rmse_log: f64,
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub delta1: f64,
    /// Threshold 1.25^2.
    pub delta2: f64,
    /// Threshold 1.25^3.
    pub delta3: f64,
    /// Population variance of the absolute error.
    pub err_variance: f64,
    pub n_valid_pixels: usize,
    pub n_images: usize,
}

/// How a test set is scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    /// Ground-truth pixels above this depth are ignored.
    pub depth_cap: f64,
    /// Rescale each prediction by median(gt) / median(pred) before
    /// scoring, as in zero-shot transfer where scale is unobserved.
    pub median_scaling: bool,
}

impl ProtocolSpec {
    /// Same-distribution evaluation: 20 m cap, absolute scale.
    pub fn intra_domain() -> Self {
        ProtocolSpec { depth_cap: 20.0, median_scaling: false }
    }

    /// Zero-shot transfer evaluation: 10 m cap, per-image median
    /// scaling.
    pub fn zero_shot_cross_domain() -> Self {
        ProtocolSpec { depth_cap: 10.0, median_scaling: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_cap > 0.0) || !self.depth_cap.is_finite() {
            return Err(Error::Config(format!(
                "depth cap must be positive and finite, got {}",
                self.depth_cap
            )));
        }
        Ok(())
    }
}

/// Pixels that take part in scoring: positive ground truth at or below
/// the cap, intersected with the dataset's own validity mask.
pub fn protocol_valid_mask<T: Scalar>(gt: &Tensor<T>, base: &Mask, cap: f64) -> Mask {
    let (h, w) = (base.h(), base.w());
    let data = gt.data();
    let bits = (0..h * w)
        .map(|i| {
            let d = data[i].as_f64();
            base.as_slice()[i] && d > 0.0 && d <= cap
        })
        .collect();
    Mask::new(h, w, bits).expect("mask dims match by construction")
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Scale factor `median(gt) / median(pred)` over valid pixels. The
/// median of an even count is the mean of the two central values.
pub fn median_scale<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, valid: &Mask) -> Result<f64> {
    let mut ps = Vec::new();
    let mut gs = Vec::new();
    for i in 0..valid.len() {
        if valid.as_slice()[i] {
            ps.push(pred.data()[i].as_f64());
            gs.push(gt.data()[i].as_f64());
        }
    }
    if ps.is_empty() {
        return Err(Error::EmptySupport("median scaling over zero valid pixels".into()));
    }
    let mp = median_of(ps);
    if !(mp > 0.0) || !mp.is_finite() {
        return Err(Error::Degenerate(format!("median predicted depth {mp} is not positive")));
    }
    Ok(median_of(gs) / mp)
}

/// Metrics for one prediction/ground-truth pair over the valid pixels.
/// `scale` multiplies the prediction first (1.0 for absolute scoring).
pub fn image_metrics<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: &Mask,
    scale: f64,
) -> Result<MetricsRecord> {
    if pred.len() != valid.len() || gt.len() != valid.len() {
        return Err(Error::Shape(format!(
            "metric inputs disagree: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let mut n = 0usize;
    let mut abs_sum = 0.0;
    let mut abs_sq_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut log_sq_sum = 0.0;
    let mut d = [0usize; 3];
    for i in 0..valid.len() {
        if !valid.as_slice()[i] {
            continue;
        }
        let x = pred.data()[i].as_f64() * scale;
        let y = gt.data()[i].as_f64();
        if !x.is_finite() || !(x > 0.0) {
            return Err(Error::Degenerate(format!("non-positive or non-finite prediction {x}")));
        }
        let e = (x - y).abs();
        n += 1;
        abs_sum += e;
        abs_sq_sum += e * e;
        rel_sum += e / y;
        sq_sum += (x - y) * (x - y);
        let dl = x.ln() - y.ln();
        log_sq_sum += dl * dl;
        let ratio = (x / y).max(y / x);
        // Strict comparison: a ratio exactly at the threshold fails it.
        if ratio < 1.25 {
            d[0] += 1;
        }
        if ratio < 1.25f64.powi(2) {
            d[1] += 1;
        }
        if ratio < 1.25f64.powi(3) {
            d[2] += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySupport("no valid pixels to score".into()));
    }
    let nf = n as f64;
    let mae = abs_sum / nf;
    Ok(MetricsRecord {
        mae,
        absrel: rel_sum / nf,
        rmse: (sq_sum / nf).sqrt(),
        rmse_log: (log_sq_sum / nf).sqrt(),
        delta1: d[0] as f64 / nf,
        delta2: d[1] as f64 / nf,
        delta3: d[2] as f64 / nf,
        err_variance: abs_sq_sum / nf - mae * mae,
        n_valid_pixels: n,
        n_images: 1,
    })
}

/// Unweighted mean of per-image records. Pixel counts sum.
pub fn aggregate_metrics(per_image: &[MetricsRecord]) -> Result<MetricsRecord> {
    if per_image.is_empty() {
        return Err(Error::EmptySupport("aggregating zero image records".into()));
    }
    let nf = per_image.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| per_image.iter().map(f).sum::<f64>() / nf;
    Ok(MetricsRecord {
        mae: mean(|r| r.mae),
        absrel: mean(|r| r.absrel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        err_variance: mean(|r| r.err_variance),
        n_valid_pixels: per_image.iter().map(|r| r.n_valid_pixels).sum(),
        n_images: per_image.iter().map(|r| r.n_images).sum(),
    })
}

/// Anything that maps a single `[3, H, W]` image to `[1, H, W]` depth.
pub trait DepthPredictor<T: Scalar>: Sync {
    fn predict_depth_one(&self, image: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> DepthPredictor<T> for TrainedModel<T> {
    fn predict_depth_one(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_one(image)
    }
}

/// Full evaluation output: the aggregate, every per-image record in
/// dataset order, and how many images had no scoreable pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ProtocolSpec,
    pub metrics: MetricsRecord,
    pub per_image: Vec<MetricsRecord>,
    pub skipped_images: usize,
}

/// Scores a predictor over a dataset under the given protocol. Images
/// whose ground truth has no pixels under the cap are skipped and
/// counted; a dataset where everything is skipped is an error.
pub fn evaluate_model<T: Scalar, P: DepthPredictor<T> + ?Sized>(
    predictor: &P,
    ds: &Dataset<T>,
    protocol: &ProtocolSpec,
) -> Result<EvalReport> {
    protocol.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptySupport("evaluating over an empty dataset".into()));
    }
    // Per-image records in index order; reduction below is sequential,
    // so the report is identical with and without parallelism.
    let rows: Vec<Result<Option<MetricsRecord>>> = par::map_indexed(ds.len(), |i| {
        let task = &ds.tasks[i];
        let pred = predictor.predict_depth_one(&task.image)?;
        pred.ensure_finite("predicted depth")?;
        let valid = protocol_valid_mask(&task.depth, &task.valid, protocol.depth_cap);
        if valid.count_true() == 0 {
            return Ok(None);
        }
        let scale = if protocol.median_scaling {
            median_scale(&pred, &task.depth, &valid)?
        } else {
            1.0
        };
        image_metrics(&pred, &task.depth, &valid, scale).map(Some)
    });
    let mut per_image = Vec::with_capacity(ds.len());
    let mut skipped = 0usize;
    for row in rows {
        match row? {
            Some(r) => per_image.push(r),
            None => skipped += 1,
        }
    }
    if per_image.is_empty() {
        return Err(Error::EmptySupport(format!(
            "all {skipped} images had no pixels under the {} m cap",
            protocol.depth_cap
        )));
    }
    Ok(EvalReport {
        protocol: *protocol,
        metrics: aggregate_metrics(&per_image)?,
        per_image,
        skipped_images: skipped,
    })
}

/// Population variance of the absolute depth error over the pixels where
/// both masks hold. `None` when fewer than two pixels qualify.
pub fn masked_error_variance<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    region: &Mask,
    valid: &Mask,
) -> Result<Option<f64>> {
    if pred.len() != region.len() || gt.len() != region.len() || valid.len() != region.len() {
        return Err(Error::Shape("region variance inputs disagree in size".into()));
    }
    let mut errs = Vec::new();
    for i in 0..region.len() {
        if region.as_slice()[i] && valid.as_slice()[i] {
            errs.push((pred.data()[i].as_f64() - gt.data()[i].as_f64()).abs());
        }
    }
    Ok(population_variance(&errs))
}

/// Population variance of raw `values` (a depth map, say) over the
/// pixels where both masks hold. `None` when fewer than two pixels
/// qualify. This is the per-region dispersion used to judge whether a
/// model hallucinates relief from flat texture.
pub fn masked_value_variance<T: Scalar>(
    values: &Tensor<T>,
    region: &Mask,
    valid: &Mask,
) -> Result<Option<f64>> {
    if values.len() != region.len() || valid.len() != region.len() {
        return Err(Error::Shape("region variance inputs disagree in size".into()));
    }
    let mut vals = Vec::new();
    for i in 0..region.len() {
        if region.as_slice()[i] && valid.as_slice()[i] {
            vals.push(values.data()[i].as_f64());
        }
    }
    Ok(population_variance(&vals))
}

fn population_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Relative change of `method` against `baseline`: percent for error
/// metrics (negative is better), percentage points for the threshold
/// accuracies (positive is better).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    pub mae_pct: f64,
    pub absrel_pct: f64,
    pub rmse_pct: f64,
    pub rmse_log_pct: f64,
    pub err_variance_pct: f64,
    pub delta1_pts: f64,
    pub delta2_pts: f64,
    pub delta3_pts: f64,
}

pub fn compare_methods(baseline: &MetricsRecord, method: &MetricsRecord) -> Result<Comparison> {
    let pct = |b: f64, m: f64, what: &str| -> Result<f64> {
        if b == 0.0 {
            return Err(Error::Degenerate(format!("baseline {what} is zero; no relative change")));
        }
        Ok((m - b) / b * 100.0)
    };
    Ok(Comparison {
        mae_pct: pct(baseline.mae, method.mae, "mae")?,
        absrel_pct: pct(baseline.absrel, method.absrel, "absrel")?,
        rmse_pct: pct(baseline.rmse, method.rmse, "rmse")?,
        rmse_log_pct: pct(baseline.rmse_log, method.rmse_log, "rmse_log")?,
        err_variance_pct: pct(baseline.err_variance, method.err_variance, "err_variance")?,
        delta1_pts: (method.delta1 - baseline.delta1) * 100.0,
        delta2_pts: (method.delta2 - baseline.delta2) * 100.0,
        delta3_pts: (method.delta3 - baseline.delta3) * 100.0,
    })
}

const CSV_HEADER: &str =
    "label,mae,absrel,rmse,rmse_log,delta1,delta2,delta3,err_variance,n_valid_pixels,n_images";

/// Writes labelled metric rows as CSV. Numbers use Rust's shortest
/// round-trip formatting, so identical inputs give identical bytes.
pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricsRecord)]) -> Result<()> {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (label, r) in rows {
        if label.contains(',') || label.contains('\n') {
            return Err(Error::Data(format!("label {label:?} may not contain commas or newlines")));
        }
        out.push_str(&format!(
            "{label},{},{},{},{},{},{},{},{},{},{}\n",
            r.mae,
            r.absrel,
            r.rmse,
            r.rmse_log,
            r.delta1,
            r.delta2,
            r.delta3,
            r.err_variance,
            r.n_valid_pixels,
            r.n_images
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a full evaluation report as pretty JSON with stable field
/// order.
pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("serializing report: {e}")))?;
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path, e))
}
