//! Runs a CBAM module on a feature map with one bright region and prints the
//! channel and spatial attention it produces.

use yolite::blocks::{Cbam, CBAM_REDUCTION};
use yolite::tensor::{Exec, Shape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let c = 8;
    let mut cbam = Cbam::new(c, CBAM_REDUCTION)?;

    // With all-zero weights both maps are sigmoid(0), so the output is F/4.
    let f = Tensor::from_fn(Shape::new(1, c, 8, 8), |_, ch, y, x| {
        let hot = (2..5).contains(&y) && (3..6).contains(&x);
        (ch as f32 + 1.0) * if hot { 1.0 } else { 0.1 }
    })?;
    let out = cbam.forward(&f, Exec::Serial)?;
    println!("zero weights: out/in = {}", out.at(0, 3, 3, 4) / f.at(0, 3, 3, 4));

    // Center taps: +max, -mean. Bright spots with high peaks stand out.
    cbam.spatial.weights[24] = 1.0;
    cbam.spatial.weights[49 + 24] = -1.0;
    if let Some(b) = cbam.spatial.bias.as_mut() {
        b[0] = -1.0;
    }
    cbam.fc1.weights.iter_mut().for_each(|w| *w = 0.05);
    cbam.fc2.weights.iter_mut().for_each(|w| *w = 0.05);

    let cm = cbam.channel_map(&f, Exec::Serial)?;
    println!("channel map: {:?}", cm.data().iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    let sm = cbam.spatial_map(&f, Exec::Serial)?;
    println!("spatial map:");
    for y in 0..8 {
        let row: Vec<String> = (0..8).map(|x| format!("{:.2}", sm.at(0, 0, y, x))).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
