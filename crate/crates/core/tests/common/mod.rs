//! Naive reference implementations and helpers shared by the integration
//! tests. Every oracle here is a direct loop transcription with no reuse of
//! library code beyond data containers.
#![allow(dead_code)]

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use yolite::detect::{BBox, Detection};
use yolite::tensor::{BatchNorm, ConvParams, PoolKind, Shape, Tensor};

pub struct TestRng(Xoshiro256StarStar);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }

    pub fn inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn f32s(&mut self, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| (self.range(-1.0, 1.0) as f32) * scale).collect()
    }

    pub fn tensor(&mut self, shape: Shape) -> Tensor {
        Tensor::new(shape, self.f32s(shape.numel(), 1.0)).unwrap()
    }

    pub fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, bn: bool) -> ConvParams {
        let weights = self.f32s(cout * cin * k * k, 0.5);
        let bias = bias.then(|| self.f32s(cout, 0.2));
        let bn = bn.then(|| BatchNorm {
            gamma: (0..cout).map(|_| self.range(0.5, 1.5) as f32).collect(),
            beta: self.f32s(cout, 0.3),
            running_mean: self.f32s(cout, 0.3),
            running_var: (0..cout).map(|_| self.range(0.2, 2.0) as f32).collect(),
            eps: 1e-5,
        });
        ConvParams::new(cin, cout, k, stride, pad, weights, bias, bn).unwrap()
    }
}

/// Direct six-loop convolution: for each output element, sum over
/// (ci, ky, kx) of in-bounds taps starting from 0, then bias, then BN.
pub fn conv_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
    let s = x.shape();
    let k = p.kernel;
    let oh = (s.h + 2 * p.pad - k) / p.stride + 1;
    let ow = (s.w + 2 * p.pad - k) / p.stride + 1;
    let mut out = Vec::new();
    for n in 0..s.n {
        for co in 0..p.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                                let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let w = p.weights[((co * s.c + ci) * k + ky) * k + kx];
                                acc += w * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    if let Some(b) = &p.bias {
                        acc += b[co];
                    }
                    if let Some(bn) = &p.bn {
                        acc = (acc - bn.running_mean[co]) / (bn.running_var[co] + bn.eps).sqrt() * bn.gamma[co]
                            + bn.beta[co];
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n, p.out_channels, oh, ow), out).unwrap()
}

pub fn pool_oracle(x: &Tensor, kind: PoolKind, k: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut window = Vec::new();
                    for ky in 0..k {
                        for kx in 0..k {
                            window.push(x.at(n, c, oy * stride + ky, ox * stride + kx));
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => window.iter().copied().fold(window[0], f32::max),
                        PoolKind::Avg => window.iter().sum::<f32>() / (k * k) as f32,
                    });
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n, s.c, oh, ow), out).unwrap()
}

/// Global per-channel reduction, `(n, c, 1, 1)`.
pub fn channel_pool_oracle(x: &Tensor, kind: PoolKind) -> Tensor {
    let s = x.shape();
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            let mut vals = Vec::new();
            for y in 0..s.h {
                for xx in 0..s.w {
                    vals.push(x.at(n, c, y, xx));
                }
            }
            out.push(match kind {
                PoolKind::Max => vals.iter().copied().fold(vals[0], f32::max),
                PoolKind::Avg => vals.iter().sum::<f32>() / vals.len() as f32,
            });
        }
    }
    Tensor::new(Shape::new(s.n, s.c, 1, 1), out).unwrap()
}

/// Per-pixel reduction across channels, `(n, 1, h, w)`.
pub fn spatial_pool_oracle(x: &Tensor, kind: PoolKind) -> Tensor {
    let s = x.shape();
    let mut out = Vec::new();
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let vals: Vec<f32> = (0..s.c).map(|c| x.at(n, c, y, xx)).collect();
                out.push(match kind {
                    PoolKind::Max => vals.iter().copied().fold(vals[0], f32::max),
                    PoolKind::Avg => vals.iter().sum::<f32>() / s.c as f32,
                });
            }
        }
    }
    Tensor::new(Shape::new(s.n, 1, s.h, s.w), out).unwrap()
}

pub fn upsample_oracle(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w), |n, c, y, xx| x.at(n, c, y / 2, xx / 2)).unwrap()
}

/// Elementwise product with NumPy-style broadcasting over size-1 dims.
pub fn broadcast_mul_oracle(a: &Tensor, m: &Tensor) -> Tensor {
    let sm = m.shape();
    Tensor::from_fn(a.shape(), |n, c, y, x| {
        let pick = |i: usize, d: usize| if d == 1 { 0 } else { i };
        a.at(n, c, y, x) * m.at(pick(n, sm.n), pick(c, sm.c), pick(y, sm.h), pick(x, sm.w))
    })
    .unwrap()
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// CBAM written out from its defining equations in f64:
/// `Mc = sigmoid(MLP(avg F) + MLP(max F))`, `F' = Mc * F`,
/// `Ms = sigmoid(conv7x7([max_c F'; avg_c F']))`, `F'' = Ms * F'`.
/// Single batch element.
pub fn cbam_oracle(f: &Tensor, fc1: &ConvParams, fc2: &ConvParams, spatial: &ConvParams) -> Vec<f64> {
    let s = f.shape();
    let (c, h, w) = (s.c, s.h, s.w);
    let hidden = fc1.out_channels;
    let get = |ch: usize, y: usize, x: usize| f.at(0, ch, y, x) as f64;

    let avg: Vec<f64> = (0..c)
        .map(|ch| (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| get(ch, y, x)).sum::<f64>() / (h * w) as f64)
        .collect();
    let max: Vec<f64> = (0..c)
        .map(|ch| {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| get(ch, y, x))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let b1 = fc1.bias.as_ref().unwrap();
        let b2 = fc2.bias.as_ref().unwrap();
        let hid: Vec<f64> = (0..hidden)
            .map(|j| {
                let z: f64 = (0..c).map(|i| fc1.weights[j * c + i] as f64 * v[i]).sum::<f64>() + b1[j] as f64;
                z.max(0.0)
            })
            .collect();
        (0..c)
            .map(|i| (0..hidden).map(|j| fc2.weights[i * hidden + j] as f64 * hid[j]).sum::<f64>() + b2[i] as f64)
            .collect()
    };
    let (ma, mm) = (mlp(&avg), mlp(&max));
    let mc: Vec<f64> = (0..c).map(|i| sigmoid64(ma[i] + mm[i])).collect();

    let refined = |ch: usize, y: usize, x: usize| mc[ch] * get(ch, y, x);
    let pooled = |which: usize, y: usize, x: usize| -> f64 {
        let vals = (0..c).map(|ch| refined(ch, y, x));
        if which == 0 {
            vals.fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.sum::<f64>() / c as f64
        }
    };
    let k = spatial.kernel as isize;
    let pad = spatial.pad as isize;
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut z = spatial.bias.as_ref().unwrap()[0] as f64;
            for which in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = (y as isize + ky - pad, x as isize + kx - pad);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let wv = spatial.weights[((which as isize * k + ky) * k + kx) as usize] as f64;
                        z += wv * pooled(which, iy as usize, ix as usize);
                    }
                }
            }
            let ms = sigmoid64(z);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = ms * refined(ch, y, x);
            }
        }
    }
    out
}

/// IoU from corner coordinates, written independently of the library.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Textbook O(n^2) greedy NMS with a suppression flag per box.
pub fn nms_oracle(dets: &[Detection], conf_thresh: f64, iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].confidence > conf_thresh).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .partial_cmp(&dets[i].confidence)
            .unwrap()
            .then(dets[i].class_id.cmp(&dets[j].class_id))
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for a in 0..order.len() {
        if suppressed[a] {
            continue;
        }
        let da = &dets[order[a]];
        keep.push(*da);
        for b in a + 1..order.len() {
            let db = &dets[order[b]];
            if db.class_id == da.class_id && iou_oracle(&da.bbox, &db.bbox) > iou_thresh {
                suppressed[b] = true;
            }
        }
    }
    keep
}

pub fn random_detections(rng: &mut TestRng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let objectness = rng.unit();
            let class_prob = rng.unit();
            Detection {
                bbox: BBox::new(rng.range(0.0, 100.0), rng.range(0.0, 100.0), rng.range(5.0, 40.0), rng.range(5.0, 40.0)),
                class_id: rng.below(classes),
                objectness,
                class_prob,
                confidence: objectness * class_prob,
            }
        })
        .collect()
}

pub fn rel_close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(floor)
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// True when no predicted edge sits within `margin` of a ground-truth edge
/// and the overlap is not near its on/off boundary, so the CIoU loss is
/// smooth in a neighbourhood of `pred`.
pub fn ciou_smooth_at(pred: &BBox, gt: &BBox, margin: f64) -> bool {
    let (px1, py1, px2, py2) = (pred.cx - pred.w / 2.0, pred.cy - pred.h / 2.0, pred.cx + pred.w / 2.0, pred.cy + pred.h / 2.0);
    let (gx1, gy1, gx2, gy2) = (gt.cx - gt.w / 2.0, gt.cy - gt.h / 2.0, gt.cx + gt.w / 2.0, gt.cy + gt.h / 2.0);
    let edges = [px1 - gx1, px2 - gx2, py1 - gy1, py2 - gy2, px1 - gx2, px2 - gx1, py1 - gy2, py2 - gy1];
    edges.iter().all(|d| d.abs() > margin)
}

/// Central difference of `f` along coordinate `k` of a 4-vector.
pub fn central_diff(f: impl Fn([f64; 4]) -> f64, x: [f64; 4], k: usize, h: f64) -> f64 {
    let mut a = x;
    let mut b = x;
    a[k] += h;
    b[k] -= h;
    (f(a) - f(b)) / (2.0 * h)
}

pub fn random_box(rng: &mut TestRng) -> BBox {
    BBox::new(rng.range(0.0, 20.0), rng.range(0.0, 20.0), rng.range(0.5, 10.0), rng.range(0.5, 10.0))
}
