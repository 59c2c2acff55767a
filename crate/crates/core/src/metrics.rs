//! Saliency evaluation: PR curves, mean F-measure, MAE, S-measure,
//! E-measure, and dataset-level reporting.

use crate::error::{Result, SodError};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const PR_THRESHOLDS: usize = 256;
const FBETA_SQ: f64 = 0.3;

fn check_pair(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(SodError::Dimension(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Precision/recall over 256 evenly spaced thresholds (pred >= tau).
/// Precision is 1 when nothing is predicted positive; recall is 1 when the
/// ground truth is empty.
pub fn pr_curve(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<PrCurve> {
    check_pair(pred, gt)?;
    let mut thresholds = Vec::with_capacity(PR_THRESHOLDS);
    let mut precision = Vec::with_capacity(PR_THRESHOLDS);
    let mut recall = Vec::with_capacity(PR_THRESHOLDS);
    let gt_pos = gt.iter().filter(|&&g| g > 0.0).count();
    for k in 0..PR_THRESHOLDS {
        let tau = k as f64 / (PR_THRESHOLDS - 1) as f64;
        let mut tp = 0usize;
        let mut pp = 0usize;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p >= tau {
                pp += 1;
                if g > 0.0 {
                    tp += 1;
                }
            }
        }
        thresholds.push(tau);
        precision.push(if pp == 0 { 1.0 } else { tp as f64 / pp as f64 });
        recall.push(if gt_pos == 0 { 1.0 } else { tp as f64 / gt_pos as f64 });
    }
    Ok(PrCurve { thresholds, precision, recall })
}

/// F-measure with beta^2 = 0.3; 0 when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let denom = FBETA_SQ * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + FBETA_SQ) * precision * recall / denom
    }
}

/// Adaptive binarization threshold, `min(2 * mean, 1)`.
pub fn adaptive_threshold(pred: &ArrayView2<f64>) -> f64 {
    let mean = pred.sum() / pred.len() as f64;
    (2.0 * mean).min(1.0)
}

fn confusion_at(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>, tau: f64) -> (f64, f64) {
    let mut tp = 0usize;
    let mut pp = 0usize;
    let mut gt_pos = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let pos = p >= tau;
        if pos {
            pp += 1;
        }
        if g > 0.0 {
            gt_pos += 1;
            if pos {
                tp += 1;
            }
        }
    }
    let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
    let recall = if gt_pos == 0 { 1.0 } else { tp as f64 / gt_pos as f64 };
    (precision, recall)
}

/// Per-image adaptive-threshold F-measure.
pub fn adaptive_f(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let tau = adaptive_threshold(pred);
    let (p, r) = confusion_at(pred, gt, tau);
    Ok(f_measure(p, r))
}

/// Mean adaptive F over a dataset.
pub fn mean_f<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Array2<f64>, &'a Array2<f64>)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pred, gt) in pairs {
        sum += adaptive_f(&pred.view(), &gt.view())?;
        n += 1;
    }
    if n == 0 {
        return Err(SodError::Data("mean_f over empty dataset".into()));
    }
    Ok(sum / n as f64)
}

/// Mean absolute error.
pub fn mae(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p - g).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

fn region_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// Object-level similarity: 2*x / (x^2 + 1 + sigma_x), sample std dev.
fn object_score(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let x = region_mean(vals);
    let n = vals.len();
    let sigma = if n > 1 {
        (vals.iter().map(|&v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> f64 {
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g > 0.0)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g == 0.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let mu = gt.iter().filter(|&&g| g > 0.0).count() as f64 / gt.len() as f64;
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

// SSIM-flavored region similarity used by the structure measure.
fn region_ssim(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 1.0;
    }
    let x = pred.sum() / n as f64;
    let y = gt.sum() / n as f64;
    let denom = (n.max(2) - 1) as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    sx /= denom;
    sy /= denom;
    sxy /= denom;
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / (b + f64::EPSILON)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn gt_centroid(gt: &ArrayView2<f64>) -> (usize, usize) {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let total: f64 = gt.sum();
    if total == 0.0 {
        return (h / 2, w / 2);
    }
    let mut ry = 0.0;
    let mut cx = 0.0;
    for i in 0..h {
        for j in 0..w {
            ry += gt[[i, j]] * (i + 1) as f64;
            cx += gt[[i, j]] * (j + 1) as f64;
        }
    }
    let y = (ry / total).round() as usize;
    let x = (cx / total).round() as usize;
    (y.clamp(1, h), x.clamp(1, w))
}

fn s_region(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> f64 {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let (cy, cx) = gt_centroid(gt);
    let area = (h * w) as f64;
    let mut score = 0.0;
    for (rows, cols) in [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ] {
        let p = pred.slice(ndarray::s![rows.clone(), cols.clone()]);
        let g = gt.slice(ndarray::s![rows, cols]);
        let weight = p.len() as f64 / area;
        score += weight * region_ssim(&p, &g);
    }
    score
}

/// Structure measure: 0.5 * object similarity + 0.5 * region similarity,
/// with degenerate conventions for empty / full ground truths.
pub fn s_measure(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let mean_pred = pred.sum() / pred.len() as f64;
    let mu = gt.iter().filter(|&&g| g > 0.0).count() as f64 / gt.len() as f64;
    if mu == 0.0 {
        return Ok(1.0 - mean_pred);
    }
    if mu == 1.0 {
        return Ok(mean_pred);
    }
    Ok((0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt)).max(0.0))
}

/// Enhanced-alignment measure on the adaptively binarized prediction.
pub fn e_measure(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let tau = adaptive_threshold(pred);
    // tau == 0 means an identically-zero prediction; keep it empty instead
    // of letting `>= 0` mark every pixel positive
    let bin = if tau == 0.0 {
        Array2::zeros(pred.raw_dim())
    } else {
        pred.mapv(|p| if p >= tau { 1.0 } else { 0.0 })
    };
    e_measure_binary(&bin.view(), gt)
}

/// E-measure of an already-binarized prediction.
pub fn e_measure_binary(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = gt.len() as f64;
    let mean_p = pred.sum() / n;
    let mean_g = gt.sum() / n;
    if mean_g == 0.0 {
        return Ok(1.0 - mean_p);
    }
    if mean_g == 1.0 {
        return Ok(mean_p);
    }
    let mut acc = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let fp = p - mean_p;
        let fg = g - mean_g;
        let denom = fg * fg + fp * fp;
        let xi = if denom == 0.0 { 1.0 } else { 2.0 * fg * fp / denom };
        acc += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    Ok(acc / n)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageRow {
    pub stem: String,
    pub threshold: f64,
    pub f: f64,
    pub mae: f64,
    pub s: f64,
    pub e: f64,
}

/// JSON summary schema: exactly {mF, MAE, S, E, n_images}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(rename = "mF")]
    pub m_f: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub checkpoint: String,
    pub summary: MetricSummary,
    pub per_image: Vec<PerImageRow>,
    pub pr: PrCurve,
}

/// Score matched (stem, prediction, ground-truth) triples; predictions must
/// already be at ground-truth resolution and in [0,1].
pub fn evaluate_pairs(
    dataset: &str,
    checkpoint: &str,
    pairs: &[(String, Array2<f64>, Array2<f64>)],
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(SodError::Data("evaluate: empty dataset".into()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let mut prec_sum = vec![0.0; PR_THRESHOLDS];
    let mut rec_sum = vec![0.0; PR_THRESHOLDS];
    let mut thresholds = Vec::new();
    let (mut mf, mut mmae, mut ms, mut me) = (0.0, 0.0, 0.0, 0.0);
    for (stem, pred, gt) in pairs {
        let pv = pred.view();
        let gv = gt.view();
        let tau = adaptive_threshold(&pv);
        let f = adaptive_f(&pv, &gv)?;
        let a = mae(&pv, &gv)?;
        let s = s_measure(&pv, &gv)?;
        let e = e_measure(&pv, &gv)?;
        let curve = pr_curve(&pv, &gv)?;
        for k in 0..PR_THRESHOLDS {
            prec_sum[k] += curve.precision[k];
            rec_sum[k] += curve.recall[k];
        }
        thresholds = curve.thresholds;
        mf += f;
        mmae += a;
        ms += s;
        me += e;
        per_image.push(PerImageRow {
            stem: stem.clone(),
            threshold: tau,
            f,
            mae: a,
            s,
            e,
        });
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        dataset: dataset.to_string(),
        checkpoint: checkpoint.to_string(),
        summary: MetricSummary {
            m_f: mf / n,
            mae: mmae / n,
            s: ms / n,
            e: me / n,
            n_images: pairs.len(),
        },
        per_image,
        pr: PrCurve {
            thresholds,
            precision: prec_sum.iter().map(|v| v / n).collect(),
            recall: rec_sum.iter().map(|v| v / n).collect(),
        },
    })
}

impl MetricReport {
    /// Per-image rows as CSV: stem, adaptive threshold, F, MAE, S, E.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "stem,threshold,F,MAE,S,E")?;
        for row in &self.per_image {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                row.stem, row.threshold, row.f, row.mae, row.s, row.e
            )?;
        }
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.summary)
            .map_err(|e| SodError::Data(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

impl PrCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "threshold,precision,recall")?;
        for k in 0..self.thresholds.len() {
            writeln!(
                f,
                "{:.6},{:.6},{:.6}",
                self.thresholds[k], self.precision[k], self.recall[k]
            )?;
        }
        Ok(())
    }
}
