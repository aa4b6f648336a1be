//! Head decoding, box geometry, confidence filtering and NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_IOU_THRESH: f64 = 0.45;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("head has {actual} channels, expected {expected} ({anchors} anchors x (5 + classes))")]
    Channels {
        expected: usize,
        actual: usize,
        anchors: usize,
    },
    #[error("head must be a single square (1, C, S, S) map, got {0}")]
    HeadShape(crate::tensor::Shape),
    #[error("invalid anchors: {0}")]
    Anchors(String),
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// Axis-aligned box in center form, pixel units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Training-time confidence target: `P * IoU` with `P` in {0, 1}.
pub fn confidence_score(object_present: bool, iou: f64) -> f64 {
    if object_present {
        iou
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub objectness: f64,
    pub class_prob: f64,
    /// `objectness * class_prob`
    pub confidence: f64,
}

/// Anchor (width, height) pairs in input pixels, per output stride.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// Stride-32 head (13x13 at 416).
    pub coarse: Vec<(f64, f64)>,
    /// Stride-16 head (26x26 at 416).
    pub fine: Vec<(f64, f64)>,
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self {
            coarse: vec![(81.0, 82.0), (135.0, 169.0), (344.0, 319.0)],
            fine: vec![(10.0, 14.0), (23.0, 27.0), (37.0, 58.0)],
        }
    }
}

impl AnchorSet {
    /// Parses six `w,h` pairs, fine head first: `"10,14 23,27 37,58 81,82 135,169 344,319"`.
    pub fn parse(s: &str) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = s
            .split_whitespace()
            .map(|p| {
                let (w, h) = p
                    .split_once(',')
                    .ok_or_else(|| DetectError::Anchors(format!("expected w,h got '{p}'")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| DetectError::Anchors(format!("'{v}': {e}")))
                };
                Ok((parse(w)?, parse(h)?))
            })
            .collect::<Result<_>>()?;
        if pairs.len() != 6 {
            return Err(DetectError::Anchors(format!("expected 6 pairs, got {}", pairs.len())));
        }
        let set = Self {
            fine: pairs[..3].to_vec(),
            coarse: pairs[3..].to_vec(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .coarse
            .iter()
            .chain(&self.fine)
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(DetectError::Anchors("dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Decodes one head into `S * S * B` detections (best class per box).
///
/// Channel `b * (5 + C) + k` holds, for anchor `b`: `tx, ty, tw, th, to`
/// then `C` class logits.
pub fn decode_head(head: &Tensor, anchors: &[(f64, f64)], input_size: usize) -> Result<Vec<Detection>> {
    let s = head.shape();
    if s.n != 1 || s.h != s.w || s.h == 0 {
        return Err(DetectError::HeadShape(s));
    }
    let b = anchors.len();
    if b == 0 || !s.c.is_multiple_of(b) || s.c / b < 6 {
        return Err(DetectError::Channels {
            expected: b * 6,
            actual: s.c,
            anchors: b,
        });
    }
    let per = s.c / b;
    let classes = per - 5;
    let grid = s.h;
    let stride = input_size as f64 / grid as f64;
    let sig = |v: f32| sigmoid(v as f64);

    let mut out = Vec::with_capacity(grid * grid * b);
    for gy in 0..grid {
        for gx in 0..grid {
            for (a, &(pw, ph)) in anchors.iter().enumerate() {
                let ch = |k: usize| head.at(0, a * per + k, gy, gx);
                let bbox = BBox::new(
                    (sig(ch(0)) + gx as f64) * stride,
                    (sig(ch(1)) + gy as f64) * stride,
                    pw * (ch(2) as f64).exp(),
                    ph * (ch(3) as f64).exp(),
                );
                let objectness = sig(ch(4));
                let (class_id, class_prob) = (0..classes)
                    .map(|c| (c, sig(ch(5 + c))))
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                out.push(Detection {
                    bbox,
                    class_id,
                    objectness,
                    class_prob,
                    confidence: objectness * class_prob,
                });
            }
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Ranking used by NMS: confidence descending, then class id ascending, then
/// input order.
fn rank(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    b.1.confidence
        .partial_cmp(&a.1.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.1.class_id.cmp(&b.1.class_id))
        .then(a.0.cmp(&b.0))
}

/// Drops detections with `confidence <= conf_thresh`, then runs greedy
/// per-class NMS suppressing same-class boxes with `iou > iou_thresh`.
/// The result is in rank order.
pub fn filter_and_nms(dets: &[Detection], conf_thresh: f64, iou_thresh: f64) -> Vec<Detection> {
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.confidence > conf_thresh)
        .collect();
    ranked.sort_by(rank);

    let mut kept: Vec<Detection> = Vec::new();
    for (_, d) in ranked {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
