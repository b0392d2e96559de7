//! Measured channel PSNR against the configured value, and what the same
//! channel does to a full image.

use semcomm::channel::{transmit, transmit_image, ChannelConfig};
use semcomm::codec::normalize_symbols;
use semcomm::data::{generate_shapes, pixel_metrics, ShapesSpec};

fn main() -> semcomm::error::Result<()> {
    let raw: Vec<f64> = (0..200_000).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let frame = normalize_symbols(&raw, 1.0)?;
    let image = generate_shapes(&ShapesSpec::new(32, 6, 2)?, 0, 1)?.remove(0).image;
    println!("{:>6} {:>10} {:>12}", "psnr", "measured", "image psnr");
    for psnr in [1.0, 5.0, 10.0, 15.0, 20.0, 30.0] {
        let cfg = ChannelConfig::new(psnr, 1.0, 9);
        let rx = transmit(&frame, &cfg)?;
        let noise = rx.symbols.iter().zip(&frame.symbols).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / raw.len() as f64;
        let img = pixel_metrics(&transmit_image(&image.data, &cfg)?, &image.data)?;
        println!("{psnr:>6} {:>10.3} {:>12.2}", 10.0 * (1.0 / noise).log10(), img.psnr);
    }
    Ok(())
}
