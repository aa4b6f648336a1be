//! Quick invariant suite behind `yolite selftest`.

use std::path::Path;

use serde::Serialize;

use crate::analysis::{flops_of_list, receptive_field, reference_csp_layers, reference_resblock_d_layers};
use crate::blocks::Cbam;
use crate::detect::{decode_head, filter_and_nms, AnchorSet, BBox, Detection};
use crate::loss::ciou_loss;
use crate::network::{build, build_proposed, build_yolov4_tiny, Variant};
use crate::tensor::{Exec, Shape, Tensor};
use crate::weights_io::{init_seeded, load, load_bytes, tensor_checksum, to_bytes};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    ((value - target) / target).abs() <= rel
}

/// Runs every check for `variant`; a `weights` file, when given, must load.
pub fn run(variant: Variant, classes: usize, seed: u64, weights: Option<&Path>) -> Vec<Check> {
    let mut out = Vec::new();

    let csp = flops_of_list(&reference_csp_layers()).map(|r| r.total).unwrap_or(0);
    let resd = flops_of_list(&reference_resblock_d_layers()).map(|r| r.total).unwrap_or(0);
    out.push(check("flops.cspblock", csp == 742_064_128, csp.to_string()));
    out.push(check("flops.resblock_d", resd == 64_376_832, resd.to_string()));
    let ratio = csp as f64 / resd.max(1) as f64;
    out.push(check("flops.ratio", (11.52..=11.54).contains(&ratio), format!("{ratio:.4}")));

    let rf = receptive_field(&[(3, 1), (3, 1)]).map(|r| r.size).unwrap_or(0);
    out.push(check("receptive_field.two_3x3", rf == 5, rf.to_string()));

    match (build_yolov4_tiny(80), build_proposed(80)) {
        (Ok(b), Ok(p)) => {
            let (nb, np) = (b.count_params(), p.count_params());
            out.push(check(
                "params.anchors",
                within(nb as f64, 6.05661e6, 0.05) && within(np as f64, 6.16429e6, 0.05) && np > nb,
                format!("v4tiny {nb}, proposed {np}"),
            ));
        }
        _ => out.push(check("params.anchors", false, "build failed")),
    }

    let cbam_ok = Cbam::new(8, 4).ok().and_then(|c| {
        let f = Tensor::from_fn(Shape::new(1, 8, 6, 6), |_, c, y, x| (c + y) as f32 - x as f32 * 0.5).ok()?;
        let y = c.forward(&f, Exec::Serial).ok()?;
        Some(y.data().iter().zip(f.data()).all(|(a, b)| *a == 0.25 * b))
    });
    out.push(check("cbam.zero_weights", cbam_ok == Some(true), ""));

    let b = BBox::new(5.0, 5.0, 3.0, 2.0);
    let same = ciou_loss(&b, &b).map(|r| r.0).unwrap_or(f64::NAN);
    let concentric = ciou_loss(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(0.0, 0.0, 2.0, 2.0))
        .map(|r| r.0)
        .unwrap_or(f64::NAN);
    out.push(check(
        "loss.ciou",
        same == 0.0 && (concentric - 0.75).abs() < 1e-12,
        format!("identical {same}, concentric {concentric}"),
    ));

    let anchors = AnchorSet::default();
    let n = decode_head(&Tensor::zeros(Shape::new(1, 255, 13, 13)), &anchors.coarse, 416)
        .map(|d| d.len())
        .unwrap_or(0);
    out.push(check("decode.count", n == 507, n.to_string()));

    let d = |conf| Detection {
        bbox: BBox::new(10.0, 10.0, 4.0, 4.0),
        class_id: 0,
        objectness: conf,
        class_prob: 1.0,
        confidence: conf,
    };
    let kept = filter_and_nms(&[d(0.8), d(0.9)], 0.25, 0.5);
    out.push(check("nms.duplicate", kept.len() == 1 && kept[0].confidence == 0.9, ""));

    match build(variant, classes) {
        Ok(mut g) => {
            init_seeded(&mut g, seed);
            let bytes = to_bytes(&g);
            let mut h = g.clone();
            let stable = load_bytes(&mut h, &bytes).is_ok() && to_bytes(&h) == bytes;
            out.push(check("weights.roundtrip", stable, format!("{} bytes", bytes.len())));

            let x = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, c, y, x| ((c * 31 + y * 7 + x) % 17) as f32 / 16.0)
                .expect("finite");
            let sums: Vec<Option<u64>> = [Exec::Serial, Exec::Parallel, Exec::Parallel]
                .into_iter()
                .map(|e| g.forward(&x, e).ok().map(|(a, b)| tensor_checksum(&[&a, &b])))
                .collect();
            out.push(check(
                "forward.determinism",
                sums[0].is_some() && sums.iter().all(|s| *s == sums[0]),
                format!("{:016x}", sums[0].unwrap_or(0)),
            ));

            if let Some(path) = weights {
                let mut target = g.clone();
                let r = load(&mut target, path);
                out.push(check(
                    "weights.load",
                    r.is_ok(),
                    r.err().map(|e| e.to_string()).unwrap_or_default(),
                ));
            }
        }
        Err(e) => out.push(check("network.build", false, e.to_string())),
    }
    out
}
