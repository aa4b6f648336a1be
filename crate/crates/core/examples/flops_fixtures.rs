//! Counts FLOPs for the two reference stage layer lists and for both whole
//! networks, and shows where the cost goes.

use yolite::analysis::{flops_of_graph, flops_of_list, receptive_field, reference_csp_layers, reference_resblock_d_layers};
use yolite::network::{build_proposed, build_yolov4_tiny};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let csp = flops_of_list(&reference_csp_layers())?;
    let resd = flops_of_list(&reference_resblock_d_layers())?;
    println!("CSPBlock stage\n{}", csp.to_text());
    println!("ResBlock-D stage\n{}", resd.to_text());
    println!("ratio {:.3}\n", csp.total as f64 / resd.total as f64);

    for (name, g) in [("v4tiny", build_yolov4_tiny(80)?), ("proposed", build_proposed(80)?)] {
        let r = flops_of_graph(&g, 416)?;
        println!("{name:<9} {:>14} FLOPs at 416", r.total);
        for (kind, f) in &r.by_kind {
            println!("  {kind:<6} {f:>14}");
        }
    }

    // two stacked 3x3 convs see as far as one 5x5
    println!("\nreceptive field of 3x3+3x3: {}", receptive_field(&[(3, 1), (3, 1)])?.size);
    Ok(())
}
