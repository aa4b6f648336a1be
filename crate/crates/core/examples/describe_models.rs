//! Builds both networks and prints their layer tables, parameter counts and
//! head shapes at a chosen input size.
//!
//! ```text
//! cargo run --example describe_models -- 320
//! ```

use yolite::network::{build, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let size: usize = std::env::args().nth(1).map_or(Ok(416), |s| s.parse())?;
    for variant in [Variant::V4Tiny, Variant::Proposed] {
        let g = build(variant, 80)?;
        let d = g.describe(size)?;
        println!("{}", d.to_text());
        let (coarse, fine) = g.outputs();
        let shapes = g.infer_shapes(yolite::Shape::new(1, 3, size, size))?;
        for s in shapes.iter().filter(|s| s.id == coarse || s.id == fine) {
            println!("  head {:<12} {:?}", s.id, s.shape);
        }
        println!();
    }
    Ok(())
}
