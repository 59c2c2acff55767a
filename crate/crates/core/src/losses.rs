//! Training objective: edge maps, per-pixel boundary weights, weighted
//! BCE / IoU terms, and the combined two-prediction loss.
//!
//! Value functions operate on probabilities; the `*_on_logits` variants also
//! return the analytic gradient w.r.t. the logits so the objective can be
//! spliced into the autodiff graph (and checked by finite differences).

use crate::error::{Result, SodError};
use crate::tensor::Var;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_binary(m: &ArrayViewD<f64>, what: &str) -> Result<()> {
    if m.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(SodError::Data(format!("{what} must be strictly binary")));
    }
    Ok(())
}

fn check_same_shape(a: &ArrayViewD<f64>, b: &ArrayViewD<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SodError::Dimension(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Which loss terms supervise each prediction (ablation grid of the
/// training recipe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Iou,
    BceIou,
    #[default]
    WeightedBceIou,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Bce,
        LossKind::Iou,
        LossKind::BceIou,
        LossKind::WeightedBceIou,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Iou => "iou",
            LossKind::BceIou => "bce+iou",
            LossKind::WeightedBceIou => "weighted(bce+iou)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Mixing factor between the first and second prediction losses.
    pub beta: f64,
    /// Probability clamp applied inside the BCE log terms.
    pub prob_clamp_epsilon: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.5,
            prob_clamp_epsilon: 1e-7,
            kind: LossKind::WeightedBceIou,
        }
    }
}

/// Morphological gradient of a binary mask: dilate(gt) XOR erode(gt) with a
/// 3x3 square element, pixels outside the image treated as 0.
pub fn edge_map(gt: &ArrayView2<f64>) -> Result<Array2<f64>> {
    check_binary(&gt.view().into_dyn(), "edge_map input")?;
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let mut edge = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut dil = 0.0f64;
            let mut ero = 1.0f64;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    let v = if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        0.0
                    } else {
                        gt[[ni as usize, nj as usize]]
                    };
                    dil = dil.max(v);
                    ero = ero.min(v);
                }
            }
            edge[[i, j]] = if dil != ero { 1.0 } else { 0.0 };
        }
    }
    Ok(edge)
}

/// Per-pixel boundary weight, `1 + sigmoid(E)`.
pub fn alpha_weights(edge: &ArrayView2<f64>) -> Array2<f64> {
    edge.mapv(sigmoid) + 1.0
}

/// Ground truth, edge map, and boundary weights for a batch, shape (N,1,H,W).
#[derive(Debug, Clone)]
pub struct MaskBatch {
    pub gt: ArrayD<f64>,
    pub edge: ArrayD<f64>,
    pub alpha: ArrayD<f64>,
}

impl MaskBatch {
    /// Derive edge and alpha maps from a binary (N,1,H,W) ground truth.
    pub fn from_gt(gt: ArrayD<f64>) -> Result<Self> {
        if gt.ndim() != 4 || gt.shape()[1] != 1 {
            return Err(SodError::Dimension(format!(
                "MaskBatch: expected (N,1,H,W), got {:?}",
                gt.shape()
            )));
        }
        let mut edge = ArrayD::<f64>::zeros(gt.raw_dim());
        for n in 0..gt.shape()[0] {
            let plane = gt
                .index_axis(Axis(0), n)
                .index_axis_move(Axis(0), 0)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let e = edge_map(&plane.view())?;
            edge.index_axis_mut(Axis(0), n)
                .index_axis_move(Axis(0), 0)
                .assign(&e);
        }
        let alpha = edge.mapv(sigmoid) + 1.0;
        Ok(MaskBatch { gt, edge, alpha })
    }
}

// Per-pixel weight and normalizer for each loss flavor. The weighted BCE
// keeps the printed form: weight (1 + alpha_n), normalizer sum(alpha_m).
fn bce_weighting(kind: LossKind, alpha: &[f64]) -> (Vec<f64>, f64) {
    match kind {
        LossKind::WeightedBceIou => {
            let w: Vec<f64> = alpha.iter().map(|a| 1.0 + a).collect();
            let z: f64 = alpha.iter().sum();
            (w, z)
        }
        _ => (vec![1.0; alpha.len()], alpha.len() as f64),
    }
}

fn iou_weighting(kind: LossKind, alpha: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::WeightedBceIou => alpha.iter().map(|a| 1.0 + a).collect(),
        _ => vec![1.0; alpha.len()],
    }
}

fn bce_core(probs: &[f64], gt: &[f64], w: &[f64], z: f64, eps: f64) -> f64 {
    let mut acc = 0.0;
    for ((&p, &g), &wn) in probs.iter().zip(gt).zip(w) {
        let p = p.clamp(eps, 1.0 - eps);
        acc -= wn * (g * p.ln() + (1.0 - g) * (1.0 - p).ln());
    }
    acc / z
}

fn iou_core(probs: &[f64], gt: &[f64], w: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for ((&p, &g), &wn) in probs.iter().zip(gt).zip(w) {
        inter += wn * g * p;
        union += wn * (g + p - g * p);
    }
    if union == 0.0 {
        // gt and prediction both identically zero: perfect empty match
        0.0
    } else {
        1.0 - inter / union
    }
}

/// Weighted BCE per the printed formula:
/// `-sum (1+a_n)[g ln p + (1-g) ln(1-p)] / sum a_m`.
pub fn wbce(
    pred_prob: &ArrayViewD<f64>,
    gt: &ArrayViewD<f64>,
    alpha: &ArrayViewD<f64>,
    eps: f64,
) -> Result<f64> {
    check_same_shape(pred_prob, gt, "wbce")?;
    check_same_shape(pred_prob, alpha, "wbce")?;
    let probs: Vec<f64> = pred_prob.iter().copied().collect();
    let g: Vec<f64> = gt.iter().copied().collect();
    let a: Vec<f64> = alpha.iter().copied().collect();
    let (w, z) = bce_weighting(LossKind::WeightedBceIou, &a);
    Ok(bce_core(&probs, &g, &w, z, eps))
}

/// Weighted IoU loss, `1 - sum(g p (1+a)) / sum((g + p - g p)(1+a))`.
pub fn wiou(
    pred_prob: &ArrayViewD<f64>,
    gt: &ArrayViewD<f64>,
    alpha: &ArrayViewD<f64>,
) -> Result<f64> {
    check_same_shape(pred_prob, gt, "wiou")?;
    check_same_shape(pred_prob, alpha, "wiou")?;
    let probs: Vec<f64> = pred_prob.iter().copied().collect();
    let g: Vec<f64> = gt.iter().copied().collect();
    let a: Vec<f64> = alpha.iter().copied().collect();
    let w = iou_weighting(LossKind::WeightedBceIou, &a);
    Ok(iou_core(&probs, &g, &w))
}

/// One prediction's loss terms on logits, with d(term)/d(logit).
struct TermGrad {
    bce: f64,
    iou: f64,
    grad: Vec<f64>,
}

fn prediction_loss(kind: LossKind, logits: &[f64], gt: &[f64], alpha: &[f64], eps: f64) -> TermGrad {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let n = logits.len();
    let mut grad = vec![0.0; n];

    let (use_bce, use_iou) = match kind {
        LossKind::Bce => (true, false),
        LossKind::Iou => (false, true),
        LossKind::BceIou | LossKind::WeightedBceIou => (true, true),
    };

    let mut bce = 0.0;
    if use_bce {
        let (w, z) = bce_weighting(kind, alpha);
        bce = bce_core(&probs, gt, &w, z, eps);
        for i in 0..n {
            // grad is zero where the clamp is active
            if probs[i] > eps && probs[i] < 1.0 - eps {
                grad[i] += w[i] * (probs[i] - gt[i]) / z;
            }
        }
    }
    let mut iou = 0.0;
    if use_iou {
        let w = iou_weighting(kind, alpha);
        iou = iou_core(&probs, gt, &w);
        let inter: f64 = probs.iter().zip(gt).zip(&w).map(|((&p, &g), &wn)| wn * g * p).sum();
        let union: f64 = probs
            .iter()
            .zip(gt)
            .zip(&w)
            .map(|((&p, &g), &wn)| wn * (g + p - g * p))
            .sum();
        if union > 0.0 {
            for i in 0..n {
                let dp = (inter * w[i] * (1.0 - gt[i]) - w[i] * gt[i] * union) / (union * union);
                grad[i] += dp * probs[i] * (1.0 - probs[i]);
            }
        }
    }
    TermGrad { bce, iou, grad }
}

/// Component values of the combined objective, for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce_first: f64,
    pub iou_first: f64,
    pub bce_second: f64,
    pub iou_second: f64,
}

/// Combined objective on raw logits, averaged over the batch:
/// `L = beta * (bce1 + iou1) + (1 - beta) * (bce2 + iou2)`.
///
/// Returns the breakdown and the gradients w.r.t. each logit map.
pub fn supervised_loss_with_grad(
    p1_logits: &ArrayViewD<f64>,
    p2_logits: &ArrayViewD<f64>,
    masks: &MaskBatch,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ArrayD<f64>, ArrayD<f64>)> {
    check_same_shape(p1_logits, &masks.gt.view(), "supervised_loss p1")?;
    check_same_shape(p2_logits, &masks.gt.view(), "supervised_loss p2")?;
    let batch = p1_logits.shape()[0];
    let mut grad1 = ArrayD::<f64>::zeros(p1_logits.raw_dim());
    let mut grad2 = ArrayD::<f64>::zeros(p2_logits.raw_dim());
    let mut bk = LossBreakdown {
        total: 0.0,
        bce_first: 0.0,
        iou_first: 0.0,
        bce_second: 0.0,
        iou_second: 0.0,
    };
    let scale = 1.0 / batch as f64;
    for n in 0..batch {
        let gt: Vec<f64> = masks.gt.index_axis(Axis(0), n).iter().copied().collect();
        let alpha: Vec<f64> = masks.alpha.index_axis(Axis(0), n).iter().copied().collect();
        let z1: Vec<f64> = p1_logits.index_axis(Axis(0), n).iter().copied().collect();
        let z2: Vec<f64> = p2_logits.index_axis(Axis(0), n).iter().copied().collect();
        let t1 = prediction_loss(cfg.kind, &z1, &gt, &alpha, cfg.prob_clamp_epsilon);
        let t2 = prediction_loss(cfg.kind, &z2, &gt, &alpha, cfg.prob_clamp_epsilon);
        bk.bce_first += t1.bce * scale;
        bk.iou_first += t1.iou * scale;
        bk.bce_second += t2.bce * scale;
        bk.iou_second += t2.iou * scale;
        let mut g1 = grad1.index_axis_mut(Axis(0), n);
        for (dst, &src) in g1.iter_mut().zip(&t1.grad) {
            *dst = cfg.beta * src * scale;
        }
        let mut g2 = grad2.index_axis_mut(Axis(0), n);
        for (dst, &src) in g2.iter_mut().zip(&t2.grad) {
            *dst = (1.0 - cfg.beta) * src * scale;
        }
    }
    bk.total = cfg.beta * (bk.bce_first + bk.iou_first)
        + (1.0 - cfg.beta) * (bk.bce_second + bk.iou_second);
    if !bk.total.is_finite() {
        return Err(SodError::Numeric(format!(
            "non-finite loss: {bk:?}"
        )));
    }
    Ok((bk, grad1, grad2))
}

/// Autodiff wrapper: a scalar loss node whose backward seeds the two logit
/// maps with the analytic gradients above.
pub fn supervised_loss_var(
    p1: &Var,
    p2: &Var,
    masks: &MaskBatch,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let (bk, grad1, grad2) = {
        let d1 = p1.data();
        let d2 = p2.data();
        supervised_loss_with_grad(&d1.view(), &d2.view(), masks, cfg)?
    };
    let loss = Var::from_op(
        ArrayD::from_elem(vec![1], bk.total),
        vec![p1.clone(), p2.clone()],
        Box::new(move |go, _| {
            let g = go[[0]];
            vec![Some(&grad1 * g), Some(&grad2 * g)]
        }),
    );
    Ok((loss, bk))
}
