//! Reconstruction scores: squared Pearson correlation per component, vector
//! nRMSE, and robust aggregation over frames.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::field::{Component, VelocityField};

/// Gaussian consistency factor for the median absolute deviation.
pub const MAD_SCALE: f64 = 1.4826;

/// Dispersion estimator paired with [`MAD_SCALE`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deviation {
    /// Median of absolute deviations from the median.
    #[default]
    Median,
    /// Mean of absolute deviations from the median.
    Mean,
}

/// Per-frame scores of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: String,
    pub method: String,
    pub r2_vr: f64,
    pub r2_vtheta: f64,
    pub nrmse_pct: f64,
}

/// Median and robust spread of one column of per-frame scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustSummary {
    pub median: f64,
    pub robust_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub r2_vr: RobustSummary,
    pub r2_vtheta: RobustSummary,
    pub nrmse: RobustSummary,
    pub per_frame: Vec<FrameMetrics>,
}

fn masked_pairs<'a>(
    est: &'a [f64],
    reference: &'a [f64],
    mask: &'a [bool],
) -> impl Iterator<Item = (f64, f64)> + 'a {
    est.iter()
        .zip(reference)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&e, &r), _)| (e, r))
}

/// Squared Pearson correlation of paired samples.
pub fn squared_correlation_pairs<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = pairs.into_iter().collect();
    let n = pairs.len();
    if n < 2 {
        return Err(VfmError::UndefinedCorrelation(format!("{n} samples")));
    }
    let nf = n as f64;
    let (me, mr) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), &(e, r)| (a + e, b + r));
    let (me, mr) = (me / nf, mr / nf);
    let (mut see, mut srr, mut ser) = (0.0, 0.0, 0.0);
    for &(e, r) in &pairs {
        let (de, dr) = (e - me, r - mr);
        see += de * de;
        srr += dr * dr;
        ser += de * dr;
    }
    if srr == 0.0 {
        return Err(VfmError::UndefinedCorrelation("reference is constant".into()));
    }
    if see == 0.0 {
        return Ok(0.0);
    }
    Ok((ser * ser / (see * srr)).clamp(0.0, 1.0))
}

/// Squared correlation of one velocity component over `mask`.
pub fn squared_correlation(
    est: &VelocityField,
    reference: &VelocityField,
    mask: &[bool],
    component: Component,
) -> Result<f64> {
    check_shapes(est, reference, mask)?;
    squared_correlation_pairs(masked_pairs(
        est.component(component).as_slice().expect("standard layout"),
        reference.component(component).as_slice().expect("standard layout"),
        mask,
    ))
}

/// Squared correlation pooled over several frames.
pub fn squared_correlation_pooled(
    frames: &[(&VelocityField, &VelocityField, &[bool])],
    component: Component,
) -> Result<f64> {
    let mut pairs = Vec::new();
    for (est, reference, mask) in frames {
        check_shapes(est, reference, mask)?;
        pairs.extend(masked_pairs(
            est.component(component).as_slice().expect("standard layout"),
            reference.component(component).as_slice().expect("standard layout"),
            mask,
        ));
    }
    squared_correlation_pairs(pairs)
}

fn check_shapes(est: &VelocityField, reference: &VelocityField, mask: &[bool]) -> Result<()> {
    if est.shape() != reference.shape() || est.shape().0 * est.shape().1 != mask.len() {
        return Err(VfmError::ShapeMismatch(format!(
            "estimate {:?}, reference {:?}, mask of {} cells",
            est.shape(),
            reference.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// RMS of the per-cell vector error over `mask`, in percent of the largest
/// reference speed inside `mask`.
pub fn nrmse(est: &VelocityField, reference: &VelocityField, mask: &[bool]) -> Result<f64> {
    check_shapes(est, reference, mask)?;
    let er = est.v_r().as_slice().expect("standard layout");
    let et = est.v_theta().as_slice().expect("standard layout");
    let rr = reference.v_r().as_slice().expect("standard layout");
    let rt = reference.v_theta().as_slice().expect("standard layout");
    let (mut sum, mut count, mut vmax) = (0.0, 0usize, 0.0f64);
    for k in (0..mask.len()).filter(|&k| mask[k]) {
        let (dr, dt) = (er[k] - rr[k], et[k] - rt[k]);
        sum += dr * dr + dt * dt;
        count += 1;
        vmax = vmax.max(rr[k].hypot(rt[k]));
    }
    if count == 0 {
        return Err(VfmError::InvalidArgument("nRMSE mask is empty".into()));
    }
    if vmax == 0.0 {
        return Err(VfmError::InvalidArgument("reference has zero maximum speed".into()));
    }
    Ok(100.0 * (sum / count as f64).sqrt() / vmax)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(VfmError::InvalidArgument("median of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(VfmError::NonFinite("median input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median and `1.4826 x MAD`.
pub fn aggregate_robust(values: &[f64]) -> Result<RobustSummary> {
    aggregate_robust_with(values, Deviation::Median)
}

pub fn aggregate_robust_with(values: &[f64], deviation: Deviation) -> Result<RobustSummary> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    let mad = match deviation {
        Deviation::Median => median(&dev)?,
        Deviation::Mean => dev.iter().sum::<f64>() / dev.len() as f64,
    };
    Ok(RobustSummary {
        median: m,
        robust_std: MAD_SCALE * mad,
    })
}

/// Score one frame on both components.
pub fn score_frame(
    frame_id: &str,
    method: &str,
    est: &VelocityField,
    reference: &VelocityField,
    mask: &[bool],
) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        frame_id: frame_id.to_string(),
        method: method.to_string(),
        r2_vr: squared_correlation(est, reference, mask, Component::Radial)?,
        r2_vtheta: squared_correlation(est, reference, mask, Component::Angular)?,
        nrmse_pct: nrmse(est, reference, mask)?,
    })
}

/// Aggregate per-frame rows of a single method.
pub fn summarize(method: &str, rows: Vec<FrameMetrics>) -> Result<MetricsReport> {
    let col = |f: fn(&FrameMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(MetricsReport {
        method: method.to_string(),
        r2_vr: aggregate_robust(&col(|m| m.r2_vr))?,
        r2_vtheta: aggregate_robust(&col(|m| m.r2_vtheta))?,
        nrmse: aggregate_robust(&col(|m| m.nrmse_pct))?,
        per_frame: rows,
    })
}
