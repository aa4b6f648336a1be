//! Detection losses with analytic gradients with respect to the predictions.
//!
//! The total loss is the sum of a confidence term (binary cross-entropy with
//! a down-weighted no-object part), a classification term (binary
//! cross-entropy over responsible boxes) and a CIoU box regression term.
//! Everything here is computed in `f64` so that gradients can be checked
//! against finite differences tightly.
//!
//! Slots are indexed `cell * B + anchor` with `cell = gy * S + gx`, the same
//! order [`decode_head`](crate::detect::decode_head) emits.

use std::f64::consts::PI;

use thiserror::Error;

use crate::detect::{iou, BBox};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA_NOOBJ: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what} has length {actual}, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("layout mismatch: predictions {pred:?} vs targets {target:?} (S, B, C)")]
    Layout {
        pred: (usize, usize, usize),
        target: (usize, usize, usize),
    },
    #[error("box dimensions must be positive and finite (w={w}, h={h})")]
    BadBox { w: f64, h: f64 },
    #[error("slot {0} is responsible but has no ground-truth box")]
    MissingTruth(usize),
    #[error("slot index {0} out of range")]
    Slot(usize),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn check_len(what: &'static str, v: usize, expected: usize) -> Result<()> {
    if v != expected {
        return Err(LossError::Length {
            what,
            expected,
            actual: v,
        });
    }
    Ok(())
}

/// Ground-truth assignment for one detection scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub grid: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    /// Whether slot is responsible for an object.
    pub obj_mask: Vec<bool>,
    pub truth_conf: Vec<f64>,
    /// `slots * classes`, row per slot.
    pub truth_class: Vec<f64>,
    pub gt_boxes: Vec<Option<BBox>>,
    pub lambda_noobj: f64,
}

impl TargetAssignment {
    /// No responsible slots; truth confidence 0 everywhere.
    pub fn empty(grid: usize, boxes_per_cell: usize, classes: usize, lambda_noobj: f64) -> Self {
        let slots = grid * grid * boxes_per_cell;
        Self {
            grid,
            boxes_per_cell,
            classes,
            obj_mask: vec![false; slots],
            truth_conf: vec![0.0; slots],
            truth_class: vec![0.0; slots * classes],
            gt_boxes: vec![None; slots],
            lambda_noobj,
        }
    }

    pub fn slots(&self) -> usize {
        self.grid * self.grid * self.boxes_per_cell
    }

    /// Marks `slot` responsible for `gt`.
    pub fn set_responsible(&mut self, slot: usize, gt: BBox, truth_conf: f64, class_target: &[f64]) -> Result<()> {
        if slot >= self.slots() {
            return Err(LossError::Slot(slot));
        }
        check_len("class_target", class_target.len(), self.classes)?;
        self.obj_mask[slot] = true;
        self.truth_conf[slot] = truth_conf;
        self.gt_boxes[slot] = Some(gt);
        self.truth_class[slot * self.classes..(slot + 1) * self.classes].copy_from_slice(class_target);
        Ok(())
    }

    fn layout(&self) -> (usize, usize, usize) {
        (self.grid, self.boxes_per_cell, self.classes)
    }

    fn validate(&self) -> Result<()> {
        let slots = self.slots();
        check_len("obj_mask", self.obj_mask.len(), slots)?;
        check_len("truth_conf", self.truth_conf.len(), slots)?;
        check_len("truth_class", self.truth_class.len(), slots * self.classes)?;
        check_len("gt_boxes", self.gt_boxes.len(), slots)?;
        for (i, (&m, b)) in self.obj_mask.iter().zip(&self.gt_boxes).enumerate() {
            if m && b.is_none() {
                return Err(LossError::MissingTruth(i));
            }
        }
        Ok(())
    }
}

/// Assigns each ground truth to the cell containing its center and to the
/// anchor with the best shape IoU (both boxes centered at the origin).
/// Truth confidence is 1 and the class target is one-hot.
pub fn assign_targets(
    truths: &[(BBox, usize)],
    grid: usize,
    anchors: &[(f64, f64)],
    input_size: usize,
    classes: usize,
    lambda_noobj: f64,
) -> Result<TargetAssignment> {
    let mut t = TargetAssignment::empty(grid, anchors.len(), classes, lambda_noobj);
    let stride = input_size as f64 / grid as f64;
    for &(gt, class_id) in truths {
        if class_id >= classes {
            return Err(LossError::Slot(class_id));
        }
        let gx = ((gt.cx / stride).floor().max(0.0) as usize).min(grid - 1);
        let gy = ((gt.cy / stride).floor().max(0.0) as usize).min(grid - 1);
        let shape = BBox::new(0.0, 0.0, gt.w, gt.h);
        let best = anchors
            .iter()
            .enumerate()
            .map(|(a, &(w, h))| (a, iou(&shape, &BBox::new(0.0, 0.0, w, h))))
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b })
            .0;
        let mut onehot = vec![0.0; classes];
        onehot[class_id] = 1.0;
        t.set_responsible((gy * grid + gx) * anchors.len() + best, gt, 1.0, &onehot)?;
    }
    Ok(t)
}

/// Network outputs for one scale, already passed through their activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub grid: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    pub conf: Vec<f64>,
    /// `slots * classes`
    pub class_probs: Vec<f64>,
    pub boxes: Vec<BBox>,
}

impl Predictions {
    pub fn slots(&self) -> usize {
        self.grid * self.grid * self.boxes_per_cell
    }

    fn layout(&self) -> (usize, usize, usize) {
        (self.grid, self.boxes_per_cell, self.classes)
    }

    fn validate(&self) -> Result<()> {
        let slots = self.slots();
        check_len("conf", self.conf.len(), slots)?;
        check_len("class_probs", self.class_probs.len(), slots * self.classes)?;
        check_len("boxes", self.boxes.len(), slots)
    }

    /// Decodes a raw head (same transform as detection decoding) keeping
    /// every class probability.
    pub fn from_head(head: &Tensor, anchors: &[(f64, f64)], input_size: usize) -> Result<Self> {
        let s = head.shape();
        let b = anchors.len();
        if b == 0 || s.n != 1 || s.h != s.w || !s.c.is_multiple_of(b) || s.c / b < 6 {
            return Err(LossError::Length {
                what: "head channels",
                expected: b * 6,
                actual: s.c,
            });
        }
        let per = s.c / b;
        let classes = per - 5;
        let grid = s.h;
        let stride = input_size as f64 / grid as f64;
        let sig = |v: f32| 1.0 / (1.0 + (-(v as f64)).exp());
        let mut p = Predictions {
            grid,
            boxes_per_cell: b,
            classes,
            conf: Vec::new(),
            class_probs: Vec::new(),
            boxes: Vec::new(),
        };
        for gy in 0..grid {
            for gx in 0..grid {
                for (a, &(pw, ph)) in anchors.iter().enumerate() {
                    let ch = |k: usize| head.at(0, a * per + k, gy, gx);
                    p.boxes.push(BBox::new(
                        (sig(ch(0)) + gx as f64) * stride,
                        (sig(ch(1)) + gy as f64) * stride,
                        pw * (ch(2) as f64).exp(),
                        ph * (ch(3) as f64).exp(),
                    ));
                    p.conf.push(sig(ch(4)));
                    p.class_probs.extend((0..classes).map(|c| sig(ch(5 + c))));
                }
            }
        }
        Ok(p)
    }
}

/// Loss components and gradients with respect to [`Predictions`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub confidence: f64,
    pub class: f64,
    pub box_regression: f64,
    pub total: f64,
    pub grad_conf: Vec<f64>,
    pub grad_class: Vec<f64>,
    /// d/d(cx, cy, w, h) per slot; zero for slots without an object.
    pub grad_box: Vec<[f64; 4]>,
}

fn check_pair(pred: &Predictions, t: &TargetAssignment) -> Result<()> {
    if pred.layout() != t.layout() {
        return Err(LossError::Layout {
            pred: pred.layout(),
            target: t.layout(),
        });
    }
    pred.validate()?;
    t.validate()
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with clamping, and its derivative in `p`
/// (zero where the clamp is active).
fn bce(p: f64, y: f64) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
    let grad = if p == clamped {
        -(y / clamped - (1.0 - y) / (1.0 - clamped))
    } else {
        0.0
    };
    (loss, grad)
}

/// Object slots weigh 1, the rest `lambda_noobj`.
pub fn confidence_loss(pred: &Predictions, t: &TargetAssignment) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, t)?;
    let mut obj = 0.0;
    let mut noobj = 0.0;
    let mut grad = Vec::with_capacity(pred.slots());
    for i in 0..pred.slots() {
        let (l, g) = bce(pred.conf[i], t.truth_conf[i]);
        if t.obj_mask[i] {
            obj += l;
            grad.push(g);
        } else {
            noobj += l;
            grad.push(t.lambda_noobj * g);
        }
    }
    Ok((obj + t.lambda_noobj * noobj, grad))
}

/// Per-class BCE summed over responsible slots.
pub fn class_loss(pred: &Predictions, t: &TargetAssignment) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, t)?;
    let c = pred.classes;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.class_probs.len()];
    for i in (0..pred.slots()).filter(|&i| t.obj_mask[i]) {
        for k in i * c..(i + 1) * c {
            let (l, g) = bce(pred.class_probs[k], t.truth_class[k]);
            loss += l;
            grad[k] = g;
        }
    }
    Ok((loss, grad))
}

fn check_box(b: &BBox) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0 && b.w.is_finite() && b.h.is_finite() && b.cx.is_finite() && b.cy.is_finite()) {
        return Err(LossError::BadBox { w: b.w, h: b.h });
    }
    Ok(())
}

/// Derivatives of an overlap length `min(p2, g2) - max(p1, g1)` (or of an
/// enclosing length `max(p2, g2) - min(p1, g1)`) with respect to the
/// predicted center and size along one axis.
fn span_grad(p2_active: bool, p1_active: bool) -> (f64, f64) {
    let (d2, d1) = (p2_active as u8 as f64, p1_active as u8 as f64);
    // p2 = c + s/2, p1 = c - s/2; length = (.. p2 ..) - (.. p1 ..)
    (d2 - d1, 0.5 * (d2 + d1))
}

/// CIoU loss `1 - IoU + rho^2 / c^2 + v^2 / (1 - IoU + v)` with
/// `v = 4 / pi^2 * (atan(w_gt / h_gt) - atan(w / h))^2`, and its gradient
/// with respect to the predicted `(cx, cy, w, h)`.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    check_box(pred)?;
    check_box(gt)?;
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();

    // intersection
    let iw_raw = px2.min(gx2) - px1.max(gx1);
    let ih_raw = py2.min(gy2) - py1.max(gy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let (diw_c, diw_s) = if iw_raw > 0.0 { span_grad(px2 < gx2, px1 > gx1) } else { (0.0, 0.0) };
    let (dih_c, dih_s) = if ih_raw > 0.0 { span_grad(py2 < gy2, py1 > gy1) } else { (0.0, 0.0) };
    let inter = iw * ih;
    let d_inter = [ih * diw_c, iw * dih_c, ih * diw_s, iw * dih_s];
    let union = pred.w * pred.h + gt.w * gt.h - inter;
    let d_union = [
        -d_inter[0],
        -d_inter[1],
        pred.h - d_inter[2],
        pred.w - d_inter[3],
    ];
    let iou = inter / union;
    let d_iou: [f64; 4] = std::array::from_fn(|k| (d_inter[k] * union - inter * d_union[k]) / (union * union));

    // center distance over enclosing diagonal
    let (dx, dy) = (pred.cx - gt.cx, pred.cy - gt.cy);
    let rho2 = dx * dx + dy * dy;
    let ew = px2.max(gx2) - px1.min(gx1);
    let eh = py2.max(gy2) - py1.min(gy1);
    let c2 = ew * ew + eh * eh;
    let (dew_c, dew_s) = span_grad(px2 > gx2, px1 < gx1);
    let (deh_c, deh_s) = span_grad(py2 > gy2, py1 < gy1);
    let d_c2 = [2.0 * ew * dew_c, 2.0 * eh * deh_c, 2.0 * ew * dew_s, 2.0 * eh * deh_s];
    let d_rho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];
    let (dist, d_dist) = if c2 > 0.0 {
        (
            rho2 / c2,
            std::array::from_fn::<f64, 4, _>(|k| (d_rho2[k] * c2 - rho2 * d_c2[k]) / (c2 * c2)),
        )
    } else {
        (0.0, [0.0; 4])
    };

    // aspect-ratio consistency
    let k = 4.0 / (PI * PI);
    let delta = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let v = k * delta * delta;
    let norm = pred.w * pred.w + pred.h * pred.h;
    let d_v = [0.0, 0.0, 2.0 * k * delta * (-pred.h / norm), 2.0 * k * delta * (pred.w / norm)];
    let (aspect, d_aspect) = if v > 0.0 {
        let s = 1.0 - iou + v;
        (
            v * v / s,
            std::array::from_fn::<f64, 4, _>(|j| {
                let d_s = -d_iou[j] + d_v[j];
                (2.0 * v * d_v[j] * s - v * v * d_s) / (s * s)
            }),
        )
    } else {
        (0.0, [0.0; 4])
    };

    let loss = 1.0 - iou + dist + aspect;
    let grad = std::array::from_fn(|j| -d_iou[j] + d_dist[j] + d_aspect[j]);
    Ok((loss, grad))
}

/// Sum of the three components with their gradients.
pub fn total_loss(pred: &Predictions, t: &TargetAssignment) -> Result<LossBreakdown> {
    let (confidence, grad_conf) = confidence_loss(pred, t)?;
    let (class, grad_class) = class_loss(pred, t)?;
    let mut box_regression = 0.0;
    let mut grad_box = vec![[0.0; 4]; pred.slots()];
    for i in 0..pred.slots() {
        if let (true, Some(gt)) = (t.obj_mask[i], &t.gt_boxes[i]) {
            let (l, g) = ciou_loss(&pred.boxes[i], gt)?;
            box_regression += l;
            grad_box[i] = g;
        }
    }
    Ok(LossBreakdown {
        confidence,
        class,
        box_regression,
        total: confidence + class + box_regression,
        grad_conf,
        grad_class,
        grad_box,
    })
}
