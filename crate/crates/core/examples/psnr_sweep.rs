//! Sweep channel quality with a trained checkpoint.
//!
//! `cargo run --release --example psnr_sweep -- out/model.ckpt`
//! The checkpoint must come from a run with `configs/toy.conf`.

use std::path::PathBuf;

use semcomm::config::RunConfig;
use semcomm::pipeline::{load_data, load_model, simulate, summarize};

fn main() -> semcomm::error::Result<()> {
    let path = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/model.ckpt".into()));
    let mut run = RunConfig::default();
    run.apply_text(include_str!("../../../configs/toy.conf"))?;
    run.run.samples_per_psnr = 8;
    let model = load_model(&run, &path)?;
    let ds = load_data(&run)?;
    for s in summarize(&simulate(&model, &run, &ds, None)?) {
        println!(
            "{:<8} {:>5} dB  mIoU {:.3}  mse {:.4}  bits {:.0}",
            s.method, s.psnr_db, s.miou_mean, s.mse_mean, s.bits_mean
        );
    }
    Ok(())
}
