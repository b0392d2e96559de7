//! Receiver-side denoising of a noisy one-hot map compared with plain
//! thresholding.

use semcomm::codec::one_hot_encode;
use semcomm::data::{generate_shapes, ShapesSpec};
use semcomm::fds::{fds, naive_threshold, pad_absent, plane_agreement, FdsConfig};
use semcomm::link::send_map;
use semcomm::channel::ChannelConfig;

fn main() -> semcomm::error::Result<()> {
    let sample = generate_shapes(&ShapesSpec::new(32, 6, 3)?, 0, 1)?.remove(0);
    let clean = one_hot_encode(&sample.map, 6)?.full_planes();
    let raw = FdsConfig { enabled: false, ..FdsConfig::default() };
    for psnr in [1.0, 5.0, 10.0, 20.0] {
        let rx = send_map(&sample.map, 6, &ChannelConfig::new(psnr, 1.0, 4), &raw)?;
        let naive = pad_absent(&naive_threshold(&rx.raw, 0.5), 32 * 32, &rx.present, 6)?;
        let filtered = fds(&rx.raw, 32, 32, &rx.present, 6, &FdsConfig::default())?;
        println!(
            "{psnr:>4} dB  threshold {:.4}  fds {:.4}",
            plane_agreement(&naive, &clean),
            plane_agreement(&filtered, &clean)
        );
    }
    Ok(())
}
