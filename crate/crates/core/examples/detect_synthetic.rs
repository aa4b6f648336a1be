//! End-to-end detection on a synthetic image: letterbox, forward pass with
//! seeded weights, decode both heads, filter and suppress, map back to image
//! pixels. Seeded weights are random, so the boxes carry no meaning; this
//! shows the data path.

use yolite::cli::detect_tensor;
use yolite::detect::{AnchorSet, DEFAULT_IOU_THRESH};
use yolite::image::{letterbox, Image};
use yolite::network::build_proposed;
use yolite::weights_io::init_seeded;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (w, h) = (200, 120);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let inside = (60..140).contains(&x) && (30..90).contains(&y);
            data.extend(if inside { [0.9, 0.2, 0.2] } else { [0.3, 0.4, 0.5] });
        }
    }
    let img = Image { width: w, height: h, data };

    let size = 160;
    let mut g = build_proposed(80)?;
    init_seeded(&mut g, 42);
    let lb = letterbox(&img, size);
    println!("letterbox: scale {:.3}, pad ({}, {})", lb.scale_x, lb.pad_x, lb.pad_y);

    let dets = detect_tensor(&g, &lb.tensor, &AnchorSet::default(), 0.2, DEFAULT_IOU_THRESH)?;
    println!("{} detections above 0.2", dets.len());
    for d in dets.iter().take(10) {
        let b = lb.unmap_detection(d).bbox;
        println!(
            "  class {:>2}  conf {:.3}  box ({:.1}, {:.1}, {:.1}, {:.1})",
            d.class_id, d.confidence, b.cx, b.cy, b.w, b.h
        );
    }
    Ok(())
}
