//! Training objectives: reconstruction MAE, soft Dice, the masked local loss
//! and the uncertainty-weighted combination of the two phase-2 losses.
//!
//! Every loss returns its value in `f64` together with the gradient with
//! respect to its differentiable inputs. Sums run sequentially in element
//! order so results do not depend on the thread count.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::dilate_planes;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_SEG_THRESHOLD: f64 = 0.5;

/// A scalar loss and its gradient with respect to the first argument.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())))
    }
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

/// Mean absolute error.
pub fn mae_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .sum();
    check_finite("mae", sum / a.len() as f64)
}

/// MAE with its subgradient w.r.t. `a` (zero where `a == b`).
pub fn mae_loss_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<LossGrad<T>> {
    let value = mae_loss(a, b)?;
    let inv_n = T::from_f64_lossy(1.0 / a.len().max(1) as f64);
    let mut grad = a.clone();
    for (g, &y) in grad.data.iter_mut().zip(&b.data) {
        *g = if *g > y {
            inv_n
        } else if *g < y {
            -inv_n
        } else {
            T::zero()
        };
    }
    Ok(LossGrad { value, grad })
}

/// Soft Dice loss `1 - (2 sum(p g) + s) / (sum p + sum g + s)` over all
/// elements of the batch.
pub fn dice_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, smooth: f64) -> Result<f64> {
    Ok(dice_terms(pred, gt, smooth)?.0)
}

/// Returns `(loss, intersection, sum_pred + sum_gt)`.
fn dice_terms<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, smooth: f64) -> Result<(f64, f64, f64)> {
    check_same(pred, gt)?;
    if smooth < 0.0 || !smooth.is_finite() {
        return Err(Error::InvalidArgument(format!("dice smoothing {smooth}")));
    }
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("prediction {p} outside [0, 1]")));
        }
        inter += p * g;
        total += p + g;
    }
    let denom = total + smooth;
    if denom == 0.0 {
        // both empty with no smoothing: perfect agreement
        return Ok((0.0, inter, total));
    }
    Ok((check_finite("dice", 1.0 - (2.0 * inter + smooth) / denom)?, inter, total))
}

/// Soft Dice loss with its gradient w.r.t. `pred`.
pub fn dice_loss_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, smooth: f64) -> Result<LossGrad<T>> {
    let (value, inter, total) = dice_terms(pred, gt, smooth)?;
    let denom = total + smooth;
    let mut grad = gt.clone();
    if denom == 0.0 {
        grad.data.iter_mut().for_each(|v| *v = T::zero());
        return Ok(LossGrad { value, grad });
    }
    let num = 2.0 * inter + smooth;
    let d2 = denom * denom;
    for g in grad.data.iter_mut() {
        let gv = g.to_f64_lossy();
        *g = T::from_f64_lossy(-(2.0 * gv * denom - num) / d2);
    }
    Ok(LossGrad { value, grad })
}

/// Result of [`local_loss`]. `grad_seg` is identically zero: the predicted
/// mask enters only through a hard threshold and a dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLoss<T> {
    pub value: f64,
    pub grad_recon: Tensor<T>,
    pub grad_seg: Tensor<T>,
    /// The dilated predicted mask, one byte per element.
    pub mask: Vec<u8>,
}

/// `mae(dilate(pred_seg > threshold, radius) * recon, gt_map)`, dilating each
/// `h x w` plane separately.
pub fn local_loss<T: Real>(
    recon: &Tensor<T>,
    pred_seg: &Tensor<T>,
    gt_map: &Tensor<T>,
    radius: usize,
    threshold: f64,
) -> Result<LocalLoss<T>> {
    check_same(recon, pred_seg)?;
    check_same(recon, gt_map)?;
    let thr = T::from_f64_lossy(threshold);
    let binary: Vec<u8> = pred_seg.data.iter().map(|&p| u8::from(p > thr)).collect();
    let mask = dilate_planes(&binary, recon.h, recon.w, radius);
    let mut masked = recon.clone();
    for (v, &m) in masked.data.iter_mut().zip(&mask) {
        if m == 0 {
            *v = T::zero();
        }
    }
    let LossGrad { value, mut grad } = mae_loss_grad(&masked, gt_map)?;
    for (g, &m) in grad.data.iter_mut().zip(&mask) {
        if m == 0 {
            *g = T::zero();
        }
    }
    Ok(LocalLoss {
        value,
        grad_recon: grad,
        grad_seg: Tensor::zeros(pred_seg.n, pred_seg.c, pred_seg.h, pred_seg.w),
        mask,
    })
}

/// `l_seg / (2 s1^2) + l_loc / (2 s2^2) + log(s1 s2)` with
/// `log_sigma_sq = [log s1^2, log s2^2]`.
pub fn uncertainty_weighted_loss(l_seg: f64, l_loc: f64, log_sigma_sq: [f64; 2]) -> Result<f64> {
    for (name, v) in [
        ("l_seg", l_seg),
        ("l_loc", l_loc),
        ("log_sigma1_sq", log_sigma_sq[0]),
        ("log_sigma2_sq", log_sigma_sq[1]),
    ] {
        check_finite(name, v)?;
    }
    if l_seg < 0.0 || l_loc < 0.0 {
        return Err(Error::InvalidArgument(format!("negative task loss ({l_seg}, {l_loc})")));
    }
    let [s1, s2] = log_sigma_sq;
    check_finite(
        "combined loss",
        0.5 * l_seg * (-s1).exp() + 0.5 * l_loc * (-s2).exp() + 0.5 * (s1 + s2),
    )
}

/// Partial derivatives of [`uncertainty_weighted_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyGrad {
    /// d/d(log sigma_i^2)
    pub d_log_sigma_sq: [f64; 2],
    /// d/d(l_seg), the factor applied to segmentation gradients.
    pub seg_weight: f64,
    /// d/d(l_loc), the factor applied to local-loss gradients.
    pub loc_weight: f64,
}

pub fn uncertainty_weighted_grad(l_seg: f64, l_loc: f64, log_sigma_sq: [f64; 2]) -> UncertaintyGrad {
    let [s1, s2] = log_sigma_sq;
    let (e1, e2) = ((-s1).exp(), (-s2).exp());
    UncertaintyGrad {
        d_log_sigma_sq: [0.5 - 0.5 * l_seg * e1, 0.5 - 0.5 * l_loc * e2],
        seg_weight: 0.5 * e1,
        loc_weight: 0.5 * e2,
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub phase: u8,
    pub l_recon: f64,
    pub l_seg: f64,
    pub l_loc: f64,
    pub combined: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

impl LossReport {
    /// Fills `combined` and the variances from the task losses.
    pub fn phase2(epoch: usize, l_recon: f64, l_seg: f64, l_loc: f64, log_sigma_sq: [f64; 2]) -> Result<Self> {
        Ok(LossReport {
            epoch,
            phase: 2,
            l_recon,
            l_seg,
            l_loc,
            combined: uncertainty_weighted_loss(l_seg, l_loc, log_sigma_sq)?,
            sigma1_sq: log_sigma_sq[0].exp(),
            sigma2_sq: log_sigma_sq[1].exp(),
        })
    }
}

/// Appends rows to a CSV log, writing the header when the file is new or empty.
pub fn append_loss_log(path: &Path, rows: &[LossReport]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
