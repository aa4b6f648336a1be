//! Writes seeded weights to disk, reads them back into a fresh graph and
//! checks that outputs match; then shows what happens when the file does not
//! fit the architecture.

use yolite::network::{build_proposed, build_yolov4_tiny};
use yolite::tensor::{Exec, Shape, Tensor};
use yolite::weights_io::{fingerprint, init_seeded, load, param_hash, save, tensor_checksum};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::temp_dir().join(format!("yolite-example-{}.yltw", std::process::id()));

    let mut g = build_proposed(80)?;
    init_seeded(&mut g, 42);
    save(&g, &path)?;
    println!("wrote {} ({} bytes), fingerprint {:016x}", path.display(), std::fs::metadata(&path)?.len(), fingerprint(&g));

    let mut h = build_proposed(80)?;
    load(&mut h, &path)?;
    println!("parameter hash: saved {:016x}, loaded {:016x}", param_hash(&g), param_hash(&h));

    let x = Tensor::full(Shape::new(1, 3, 64, 64), 0.5);
    let sum = |net: &yolite::NetworkGraph| -> Result<u64, Box<dyn std::error::Error>> {
        let (a, b) = net.forward(&x, Exec::Parallel)?;
        Ok(tensor_checksum(&[&a, &b]))
    };
    println!("output checksum: saved {:016x}, loaded {:016x}", sum(&g)?, sum(&h)?);

    let mut other = build_yolov4_tiny(80)?;
    match load(&mut other, &path) {
        Ok(()) => println!("unexpectedly loaded into the baseline"),
        Err(e) => println!("baseline refuses the file (code {}): {e}", e.code()),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
