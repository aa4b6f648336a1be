//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use yolite::analysis::*;
use yolite::blocks::{Cbam, ConvOwner, CBAM_REDUCTION};
use yolite::detect::*;
use yolite::loss::*;
use yolite::network::*;
use yolite::tensor::*;
use yolite::weights_io::*;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn module_totals() -> (u64, u64) {
    (
        flops_of_list(&reference_csp_layers()).unwrap().total,
        flops_of_list(&reference_resblock_d_layers()).unwrap().total,
    )
}

fn c1_csp_flops() -> Outcome {
    let (r, dt) = timed(|| flops_of_list(&reference_csp_layers()).unwrap().total);
    ensure(r == 742_064_128, format!("total {r}"))?;
    ensure(dt < Duration::from_secs(1), format!("took {dt:?}"))?;
    Ok(format!("742064128 in {dt:?}"))
}

fn c2_resblock_d_flops() -> Outcome {
    let (r, dt) = timed(|| flops_of_list(&reference_resblock_d_layers()).unwrap().total);
    ensure(r == 64_376_832, format!("total {r}"))?;
    ensure(dt < Duration::from_secs(1), format!("took {dt:?}"))?;
    Ok(format!("64376832 in {dt:?}"))
}

fn c3_ratio() -> Outcome {
    let (a, b) = module_totals();
    let ratio = a as f64 / b as f64;
    ensure((11.52..=11.54).contains(&ratio), format!("ratio {ratio}"))?;
    Ok(format!("ratio {ratio:.4}"))
}

fn c4_param_anchors() -> Outcome {
    let b = build_yolov4_tiny(80).unwrap().count_params();
    let p = build_proposed(80).unwrap().count_params();
    let rel = |v: usize, t: f64| (v as f64 - t) / t;
    let (rb, rp) = (rel(b, 6.05661e6), rel(p, 6.16429e6));
    ensure(rb.abs() <= 0.05, format!("baseline {b} off by {:.2}%", 100.0 * rb))?;
    ensure(rp.abs() <= 0.05, format!("proposed {p} off by {:.2}%", 100.0 * rp))?;
    ensure(p > b, format!("proposed {p} <= baseline {b}"))?;
    Ok(format!("baseline {b} ({:+.2}%), proposed {p} ({:+.2}%)", 100.0 * rb, 100.0 * rp))
}

fn c5_receptive_field() -> Outcome {
    let two = receptive_field(&[(3, 1), (3, 1)]).unwrap().size;
    let one = receptive_field(&[(3, 1)]).unwrap().size;
    ensure(two == 5 && one == 3, format!("two {two}, one {one}"))?;
    Ok("3x3 -> 3, 3x3+3x3 -> 5".into())
}

fn c6_flops_ordering() -> Outcome {
    let b = flops_of_graph(&build_yolov4_tiny(80).unwrap(), 416).unwrap().total;
    let p = flops_of_graph(&build_proposed(80).unwrap(), 416).unwrap().total;
    ensure(p < b, format!("proposed {p} >= baseline {b}"))?;
    Ok(format!("proposed {p} < baseline {b} ({:.2}% lower)", 100.0 * (b - p) as f64 / b as f64))
}

fn c7_primitive_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = TestRng::new(7001);
    let shape = |rng: &mut TestRng| Shape::new(1, rng.inclusive(1, 8), rng.inclusive(1, 32), rng.inclusive(1, 32));
    let mut counts = [0usize; 5];
    while counts[0] < 100 {
        let (k, stride) = ([1, 3, 5, 7][rng.below(4)], rng.inclusive(1, 2));
        let pad = rng.inclusive(0, k / 2);
        let s = shape(&mut rng);
        if s.h + 2 * pad < k || s.w + 2 * pad < k {
            continue;
        }
        let (bias, bn) = (rng.unit() < 0.5, rng.unit() < 0.5);
        let cout = rng.inclusive(1, 8);
        let p = rng.conv(s.c, cout, k, stride, pad, bias, bn);
        let x = rng.tensor(s);
        let want = bits(&conv_oracle(&x, &p));
        for exec in [Exec::Serial, Exec::Parallel] {
            ensure(bits(&conv2d(&x, &p, exec).unwrap()) == want, format!("conv case {}", counts[0]))?;
        }
        counts[0] += 1;
    }
    while counts[1] < 100 {
        let s = shape(&mut rng);
        let (k, stride) = (rng.inclusive(1, 3), rng.inclusive(1, 3));
        if s.h < k || s.w < k {
            continue;
        }
        let x = rng.tensor(s);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            ensure(bits(&pool2d(&x, kind, k, stride).unwrap()) == bits(&pool_oracle(&x, kind, k, stride)), "pool")?;
        }
        counts[1] += 1;
    }
    for _ in 0..100 {
        let xs = shape(&mut rng);
        let x = rng.tensor(xs);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            ensure(bits(&channel_pool(&x, kind).unwrap()) == bits(&channel_pool_oracle(&x, kind)), "channel_pool")?;
            ensure(bits(&spatial_pool(&x, kind).unwrap()) == bits(&spatial_pool_oracle(&x, kind)), "spatial_pool")?;
        }
        counts[2] += 1;
        let us = Shape::new(1, rng.inclusive(1, 8), rng.inclusive(1, 16), rng.inclusive(1, 16));
        let u = rng.tensor(us);
        ensure(bits(&upsample_nearest2x(&u)) == bits(&upsample_oracle(&u)), "upsample")?;
        counts[3] += 1;
        let as_ = shape(&mut rng);
        let a = rng.tensor(as_);
        let s = a.shape();
        for ms in [Shape::new(1, s.c, 1, 1), Shape::new(1, 1, s.h, s.w)] {
            let m = rng.tensor(ms);
            ensure(bits(&broadcast_mul(&a, &m).unwrap()) == bits(&broadcast_mul_oracle(&a, &m)), "broadcast_mul")?;
        }
        counts[4] += 1;
    }
    let dt = t.elapsed();
    ensure(dt < Duration::from_secs(30), format!("took {dt:?}"))?;
    Ok(format!(
        "conv {} / pool {} / reductions {} / upsample {} / broadcast {} cases bit-exact in {dt:.2?}",
        counts[0], counts[1], counts[2], counts[3], counts[4]
    ))
}

fn c8_cbam() -> Outcome {
    let mut rng = TestRng::new(8001);
    for c in [4usize, 8, 16] {
        let cbam = Cbam::new(c, CBAM_REDUCTION).unwrap();
        let f = rng.tensor(Shape::new(1, c, 9, 7));
        let y = cbam.forward(&f, Exec::Serial).unwrap();
        ensure(y.data().iter().zip(f.data()).all(|(a, b)| *a == 0.25 * b), "zero-weight case is not 0.25 F")?;
    }
    let mut worst = 0.0f64;
    for case in 0..50 {
        let c = [4usize, 8, 12, 16][case % 4];
        let mut cbam = Cbam::new(c, CBAM_REDUCTION).unwrap();
        for (_, p) in cbam.convs_mut() {
            *p = rng.conv(p.in_channels, p.out_channels, p.kernel, p.stride, p.pad, true, false);
        }
        let fs = Shape::new(1, c, rng.inclusive(3, 16), rng.inclusive(3, 16));
        let f = rng.tensor(fs);
        let got = cbam.forward(&f, Exec::Parallel).unwrap();
        let want = cbam_oracle(&f, &cbam.fc1, &cbam.fc2, &cbam.spatial);
        for (g, e) in got.data().iter().zip(&want) {
            let err = (*g as f64 - e).abs() / e.abs().max(1e-2);
            worst = worst.max(err);
        }
    }
    ensure(worst <= 1e-5, format!("max relative error {worst:e}"))?;
    Ok(format!("zero case exact; 50 random cases, max rel err {worst:.1e}"))
}

fn c9_losses() -> Outcome {
    let mut rng = TestRng::new(9001);
    let b = BBox::new(3.0, 4.0, 2.0, 5.0);
    ensure(ciou_loss(&b, &b).unwrap().0 == 0.0, "identical boxes")?;
    let conc = ciou_loss(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(0.0, 0.0, 2.0, 2.0)).unwrap().0;
    ensure((conc - 0.75).abs() < 1e-12, format!("concentric {conc}"))?;

    // perfect predictions on a 2x2 grid with 2 boxes per cell, 3 classes
    let gt = BBox::new(10.0, 12.0, 6.0, 4.0);
    let mut t = TargetAssignment::empty(2, 2, 3, DEFAULT_LAMBDA_NOOBJ);
    t.set_responsible(5, gt, 1.0, &[0.0, 0.0, 1.0]).unwrap();
    let mut p = Predictions {
        grid: 2,
        boxes_per_cell: 2,
        classes: 3,
        conf: vec![0.0; 8],
        class_probs: vec![0.5; 24],
        boxes: vec![BBox::new(1.0, 1.0, 1.0, 1.0); 8],
    };
    p.conf[5] = 1.0;
    p.class_probs[15..18].copy_from_slice(&[0.0, 0.0, 1.0]);
    p.boxes[5] = gt;
    let perfect = total_loss(&p, &t).unwrap().total;
    ensure(perfect < 1e-5, format!("perfect total {perfect}"))?;

    let mut fd = 0;
    let mut nonneg = true;
    while fd < 250 {
        let gt = random_box(&mut rng);
        let pred = BBox::new(
            gt.cx + rng.range(-3.0, 3.0),
            gt.cy + rng.range(-3.0, 3.0),
            gt.w * rng.range(0.4, 1.6),
            gt.h * rng.range(0.4, 1.6),
        );
        if !ciou_smooth_at(&pred, &gt, 1e-3) {
            continue;
        }
        let (l, g) = ciou_loss(&pred, &gt).unwrap();
        nonneg &= l >= 0.0;
        let f = |v: [f64; 4]| ciou_loss(&BBox::new(v[0], v[1], v[2], v[3]), &gt).unwrap().0;
        for k in 0..4 {
            let num = central_diff(f, [pred.cx, pred.cy, pred.w, pred.h], k, 1e-6);
            ensure(rel_close(g[k], num, 1e-3, 1e-6), format!("ciou grad config {fd} coord {k}: {} vs {num}", g[k]))?;
        }

        // BCE terms on a one-slot layout
        let (pc, tc, pk, tk) = (rng.range(0.01, 0.99), rng.unit(), rng.range(0.01, 0.99), rng.unit());
        let obj = rng.unit() < 0.5;
        let mut t = TargetAssignment::empty(1, 1, 1, DEFAULT_LAMBDA_NOOBJ);
        if obj {
            t.set_responsible(0, gt, tc, &[tk]).unwrap();
        }
        t.truth_conf[0] = tc;
        let mk = |c: f64, k: f64| Predictions {
            grid: 1,
            boxes_per_cell: 1,
            classes: 1,
            conf: vec![c],
            class_probs: vec![k],
            boxes: vec![pred],
        };
        let lb = total_loss(&mk(pc, pk), &t).unwrap();
        nonneg &= lb.confidence >= 0.0 && lb.class >= 0.0 && lb.box_regression >= 0.0;
        let h = 1e-6;
        let dc = (confidence_loss(&mk(pc + h, pk), &t).unwrap().0 - confidence_loss(&mk(pc - h, pk), &t).unwrap().0) / (2.0 * h);
        let dk = (class_loss(&mk(pc, pk + h), &t).unwrap().0 - class_loss(&mk(pc, pk - h), &t).unwrap().0) / (2.0 * h);
        ensure(rel_close(lb.grad_conf[0], dc, 1e-3, 1e-6), format!("confidence grad config {fd}"))?;
        ensure(rel_close(lb.grad_class[0], dk, 1e-3, 1e-6), format!("class grad config {fd}"))?;
        fd += 1;
    }
    ensure(nonneg, "negative loss component")?;
    Ok(format!("identical 0, concentric 0.75, perfect {perfect:.1e}, {fd} gradient configs within 1e-3"))
}

fn c10_decode_nms() -> Outcome {
    let anchors = AnchorSet::default();
    let n = decode_head(&Tensor::zeros(Shape::new(1, 255, 13, 13)), &anchors.coarse, 416).unwrap().len();
    ensure(n == 507, format!("decoded {n} boxes"))?;
    let mut rng = TestRng::new(10_001);
    for case in 0..120 {
        let dets = random_detections(&mut rng, 50, 1 + case % 4);
        let (c, i) = (rng.range(0.0, 0.6), rng.range(0.1, 0.9));
        ensure(filter_and_nms(&dets, c, i) == nms_oracle(&dets, c, i), format!("nms case {case}"))?;
    }
    for case in 0..120 {
        let dets = random_detections(&mut rng, 50, 3);
        let (a, b) = (rng.range(0.0, 0.8), rng.range(0.0, 0.8));
        let (lo, hi) = (a.min(b), a.max(b));
        let iou_t = rng.range(0.2, 0.8);
        let loose = filter_and_nms(&dets, lo, iou_t);
        let strict = filter_and_nms(&dets, hi, iou_t);
        let expect: Vec<_> = loose.iter().filter(|d| d.confidence > hi).copied().collect();
        ensure(strict == expect && strict.len() <= loose.len(), format!("monotonicity case {case}"))?;
    }
    Ok("507 boxes at S=13,B=3; 120 NMS instances match; 120 threshold pairs monotone".into())
}

fn c11_determinism() -> Outcome {
    let mut g = build_proposed(80).unwrap();
    init_seeded(&mut g, 42);
    let x = Tensor::from_fn(Shape::new(1, 3, 416, 416), |_, c, y, x| ((c * 97 + y * 13 + x * 7) % 256) as f32 / 255.0).unwrap();
    let sum = |exec| {
        let (a, b) = g.forward(&x, exec).unwrap();
        tensor_checksum(&[&a, &b])
    };
    let reference = sum(Exec::Serial);
    for run in 0..10 {
        let s = sum(Exec::Parallel);
        ensure(s == reference, format!("run {run}: {s:016x} != {reference:016x}"))?;
    }
    Ok(format!("10 parallel runs + serial agree at 416, checksum {reference:016x}"))
}

fn c12_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut g = build_proposed(80).unwrap();
    init_seeded(&mut g, 42);
    let path = dir.path().join("w.yltw");
    save(&g, &path).map_err(|e| e.to_string())?;
    let mut h = build_proposed(80).unwrap();
    load(&mut h, &path).map_err(|e| e.to_string())?;
    let path2 = dir.path().join("w2.yltw");
    save(&h, &path2).map_err(|e| e.to_string())?;
    let (a, b) = (std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    ensure(a == b, "re-saved file differs")?;
    let mut other = build_yolov4_tiny(80).unwrap();
    let err = load(&mut other, &path).err();
    ensure(
        matches!(err, Some(WeightsError::FingerprintMismatch { .. })),
        format!("mismatched graph gave {err:?}"),
    )?;
    Ok(format!("{} bytes stable; mismatched architecture rejected", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("CSPBlock module FLOPs", c1_csp_flops),
        ("ResBlock-D module FLOPs", c2_resblock_d_flops),
        ("module FLOPs ratio", c3_ratio),
        ("parameter anchors", c4_param_anchors),
        ("receptive field", c5_receptive_field),
        ("whole-network FLOPs ordering", c6_flops_ordering),
        ("primitive oracle suite", c7_primitive_oracles),
        ("CBAM equation suite", c8_cbam),
        ("loss suite", c9_losses),
        ("decode/NMS suite", c10_decode_nms),
        ("determinism", c11_determinism),
        ("weight round-trip", c12_roundtrip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
